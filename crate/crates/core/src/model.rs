//! Text, image and composed image-text encoding into one embedding space.
//!
//! The text encoder reads a sequence whose slot 0 is the class token; the
//! remaining slots hold word embeddings, visual token states produced by the
//! ViT, or (for the pseudo-token baseline) injected vectors. Every slot gets
//! the text encoder's learned position row for its absolute index. The
//! embedding is the L2-normalised final hidden state of the class token.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TokenOrder};
use crate::encoder::{stack_backward, stack_forward, Dims, StackCache};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::params::{Gradients, Layout, ModelParams};
use crate::rng::{stream, Stream};
use crate::tensor::{add_into, l2_norm, linear, linear_backward, Real};
use crate::tokenizer::{TokenSequence, Vocab};

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub const NORM_TOL: f64 = 1e-6;

    /// Normalises `v`; fails on a zero or non-finite vector.
    pub fn normalize<F: Real>(v: &[F]) -> Result<Self> {
        let n = l2_norm(v);
        if !n.is_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        if n < 1e-12 {
            return Err(Error::ZeroVector);
        }
        Ok(Embedding(v.iter().map(|x| (x.to_f64() / n) as f32).collect()))
    }

    /// Wraps a vector without renormalising it. Used by the literal
    /// (un-normalised) score-fusion ablation.
    pub fn raw(v: Vec<f32>) -> Self {
        Embedding(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        crate::tensor::dot(&self.0, &other.0) / (self.norm() * other.norm())
    }
}

/// Hidden states of the kept image patches after the ViT.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenStates<F = f32> {
    pub states: Vec<F>,
    pub kept_indices: Vec<usize>,
    pub d: usize,
}

impl<F: Real> VisualTokenStates<F> {
    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.states[i * self.d..(i + 1) * self.d]
    }
}

/// Number of patches kept by masking: `ceil((1 - ratio) * n)`.
pub fn kept_count(n: usize, mask_ratio: f64) -> usize {
    let exact = (1.0 - mask_ratio) * n as f64;
    // tolerate representation error such as (1 - 0.7) * 10 = 3.0000000000000004
    ((exact - 1e-9).ceil() as usize).clamp(1, n)
}

/// Uniform sample of kept patch indices, ascending. No draws when nothing is masked.
pub fn sample_kept<R: Rng>(n: usize, mask_ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::InvalidArgument(format!("mask_ratio {mask_ratio} not in [0, 1)")));
    }
    if mask_ratio == 0.0 {
        return Ok((0..n).collect());
    }
    let keep = kept_count(n, mask_ratio);
    let mut idx = rand::seq::index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// One block of the text-encoder input sequence.
#[derive(Debug, Clone, Copy)]
pub enum Segment<'a, F> {
    Tokens(&'a TokenSequence),
    /// `rows` hidden vectors supplied directly (visual token states, pseudo tokens).
    Vectors { data: &'a [F], rows: usize },
}

impl<F> Segment<'_, F> {
    fn len(&self) -> usize {
        match self {
            Segment::Tokens(t) => t.len(),
            Segment::Vectors { rows, .. } => *rows,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextCache<F> {
    n: usize,
    token_slots: Vec<(usize, u32)>,
    vector_segments: Vec<(usize, usize, usize)>,
    stack: StackCache<F>,
    hidden: Vec<F>,
    norm: f64,
}

#[derive(Debug, Clone)]
pub struct VitCache<F> {
    kept: Vec<usize>,
    patches: Vec<F>,
    stack: StackCache<F>,
    pre_proj: Option<Vec<F>>,
}

#[derive(Debug, Clone)]
pub struct Model<F: Real = f32> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams<F>,
}

impl<F: Real> Model<F> {
    /// Fresh model with parameters drawn from the `init` stream of `config.seed`.
    pub fn init(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        if vocab.len() > config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let layout = Layout::new(&config)?;
        let mut rng = stream(config.seed, Stream::Init);
        let params = ModelParams::init(layout, &mut rng);
        Ok(Model { config, vocab, params })
    }

    pub fn from_params(config: ModelConfig, vocab: Vocab, params: ModelParams<F>) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, vocab, params })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.params.layout()
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model { config: self.config.clone(), vocab: self.vocab.clone(), params: self.params.cast() }
    }

    pub(crate) fn dims(&self) -> Dims {
        Dims { d: self.config.d_model, heads: self.config.n_heads, ff: self.config.ffn_dim() }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        Ok(self.vocab.tokenize(text, self.config.max_text_len)?.tokens)
    }

    // ---- text encoder ----

    /// Runs the text encoder over `[CLS; segments...]` and returns the
    /// un-normalised class-token hidden state.
    pub fn text_forward(&self, segments: &[Segment<'_, F>]) -> Result<(Vec<F>, TextCache<F>)> {
        let d = self.config.d_model;
        let n = 1 + segments.iter().map(Segment::len).sum::<usize>();
        if n > self.config.max_seq_len {
            return Err(Error::SequenceOverflow { len: n, max: self.config.max_seq_len });
        }
        let ids = &self.layout().text;
        let pos = self.params.get(ids.pos_emb);
        let tok = self.params.get(ids.tok_emb);
        let mut x = Vec::with_capacity(n * d);
        x.extend_from_slice(self.params.get(ids.cls));
        let mut token_slots = Vec::new();
        let mut vector_segments = Vec::new();
        let mut slot = 1;
        for (si, seg) in segments.iter().enumerate() {
            match seg {
                Segment::Tokens(t) => {
                    t.check_vocab(self.config.vocab_size)?;
                    for &id in t.ids() {
                        x.extend_from_slice(&tok[id as usize * d..(id as usize + 1) * d]);
                        token_slots.push((slot, id));
                        slot += 1;
                    }
                }
                Segment::Vectors { data, rows } => {
                    debug_assert_eq!(data.len(), rows * d);
                    x.extend_from_slice(data);
                    vector_segments.push((si, slot, *rows));
                    slot += rows;
                }
            }
        }
        add_into(&mut x, &pos[..n * d]);
        let (hidden, stack) =
            stack_forward(&self.params, &ids.blocks, (ids.lnf_g, ids.lnf_b), self.dims(), x, n, 1, "text")?;
        let norm = l2_norm(&hidden);
        if norm < 1e-12 {
            return Err(Error::ZeroVector);
        }
        Ok((hidden.clone(), TextCache { n, token_slots, vector_segments, stack, hidden, norm }))
    }

    /// Backward from the gradient of the *normalised* embedding. Returns the
    /// gradient for every `Vectors` segment as `(segment index, rows × d)`.
    pub fn text_backward(
        &self,
        cache: &TextCache<F>,
        d_embedding: &[F],
        grads: &mut Gradients<F>,
    ) -> Vec<(usize, Vec<F>)> {
        let d = self.config.d_model;
        let ids = &self.layout().text;
        // d/dh (h / |h|) = (g - e (e.g)) / |h|
        let inv = 1.0 / cache.norm;
        let e: Vec<f64> = cache.hidden.iter().map(|v| v.to_f64() * inv).collect();
        let eg: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b.to_f64()).sum();
        let dh: Vec<F> =
            d_embedding.iter().zip(&e).map(|(g, ev)| F::from_f64((g.to_f64() - ev * eg) * inv)).collect();

        let dx = stack_backward(&self.params, &ids.blocks, (ids.lnf_g, ids.lnf_b), self.dims(), &cache.stack, &dh, grads);

        if let Some(g) = grads.get_mut(ids.pos_emb) {
            add_into(&mut g[..cache.n * d], &dx);
        }
        if let Some(g) = grads.get_mut(ids.cls) {
            add_into(g, &dx[..d]);
        }
        if let Some(g) = grads.get_mut(ids.tok_emb) {
            for &(slot, id) in &cache.token_slots {
                let id = id as usize;
                add_into(&mut g[id * d..(id + 1) * d], &dx[slot * d..(slot + 1) * d]);
            }
        }
        cache
            .vector_segments
            .iter()
            .map(|&(si, slot, rows)| (si, dx[slot * d..(slot + rows) * d].to_vec()))
            .collect()
    }

    // ---- vision tokenizer ----

    pub fn vit_forward(&self, image: &ImageGrid, kept: &[usize]) -> Result<(Vec<F>, VitCache<F>)> {
        image.check_shape(&self.config)?;
        let c = &self.config;
        let (d, pd, np) = (c.d_model, c.patch_dim(), c.n_patches());
        if kept.is_empty() || kept.iter().any(|&k| k >= np) {
            return Err(Error::InvalidArgument("kept patch indices out of range".into()));
        }
        let all = image.patchify(c.patch_size);
        let mut patches = Vec::with_capacity(kept.len() * pd);
        for &k in kept {
            patches.extend(all[k * pd..(k + 1) * pd].iter().map(|&v| F::from_f64(v as f64)));
        }
        let ids = &self.layout().vision;
        let n = kept.len();
        let mut x = linear(&patches, n, pd, self.params.get(ids.patch_w), Some(self.params.get(ids.patch_b)), d);
        let pos = self.params.get(ids.pos_emb);
        for (r, &k) in kept.iter().enumerate() {
            add_into(&mut x[r * d..(r + 1) * d], &pos[k * d..(k + 1) * d]);
        }
        let (mut states, stack) =
            stack_forward(&self.params, &ids.blocks, (ids.lnf_g, ids.lnf_b), self.dims(), x, n, n, "vision")?;
        let mut pre_proj = None;
        if let Some((w, b)) = ids.proj {
            let projected = linear(&states, n, d, self.params.get(w), Some(self.params.get(b)), d);
            pre_proj = Some(std::mem::replace(&mut states, projected));
        }
        Ok((states, VitCache { kept: kept.to_vec(), patches, stack, pre_proj }))
    }

    pub fn vit_backward(&self, cache: &VitCache<F>, d_states: &[F], grads: &mut Gradients<F>) {
        let c = &self.config;
        let (d, pd) = (c.d_model, c.patch_dim());
        let ids = &self.layout().vision;
        let n = cache.kept.len();
        let mut g = d_states.to_vec();
        if let (Some((w, b)), Some(pre)) = (ids.proj, &cache.pre_proj) {
            let (dw, db) = grads.pair_mut(w, b);
            g = linear_backward(pre, n, d, self.params.get(w), d, &g, dw, db, true).expect("dx requested");
        }
        let dx = stack_backward(&self.params, &ids.blocks, (ids.lnf_g, ids.lnf_b), self.dims(), &cache.stack, &g, grads);
        if let Some(gp) = grads.get_mut(ids.pos_emb) {
            for (r, &k) in cache.kept.iter().enumerate() {
                add_into(&mut gp[k * d..(k + 1) * d], &dx[r * d..(r + 1) * d]);
            }
        }
        let (dw, db) = grads.pair_mut(ids.patch_w, ids.patch_b);
        linear_backward(&cache.patches, n, pd, self.params.get(ids.patch_w), d, &dx, dw, db, false);
    }

    /// Patchifies, masks with draws from `rng` only, and runs the ViT.
    pub fn image_to_visual_tokens<R: Rng>(
        &self,
        image: &ImageGrid,
        mask_ratio: f64,
        rng: &mut R,
    ) -> Result<VisualTokenStates<F>> {
        image.check_shape(&self.config)?;
        let kept = sample_kept(self.config.n_patches(), mask_ratio, rng)?;
        let (states, _) = self.vit_forward(image, &kept)?;
        Ok(VisualTokenStates { states, kept_indices: kept, d: self.config.d_model })
    }

    fn all_patches(&self) -> Vec<usize> {
        (0..self.config.n_patches()).collect()
    }

    pub(crate) fn embed(&self, segments: &[Segment<'_, F>]) -> Result<Embedding> {
        let (h, _) = self.text_forward(segments)?;
        Embedding::normalize(&h)
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Embedding> {
        self.embed(&[Segment::Tokens(tokens)])
    }

    /// Inference path: no masking.
    pub fn encode_image(&self, image: &ImageGrid) -> Result<Embedding> {
        let (states, _) = self.vit_forward(image, &self.all_patches())?;
        self.embed(&[Segment::Vectors { data: &states, rows: self.config.n_patches() }])
    }

    pub fn encode_interleaved(&self, image: &ImageGrid, tokens: &TokenSequence, order: TokenOrder) -> Result<Embedding> {
        let n = 1 + self.config.n_patches() + tokens.len();
        if n > self.config.max_seq_len {
            return Err(Error::SequenceOverflow { len: n, max: self.config.max_seq_len });
        }
        let (states, _) = self.vit_forward(image, &self.all_patches())?;
        let vis = Segment::Vectors { data: &states, rows: self.config.n_patches() };
        let txt = Segment::Tokens(tokens);
        match order {
            TokenOrder::VisualFirst => self.embed(&[vis, txt]),
            TokenOrder::TextFirst => self.embed(&[txt, vis]),
        }
    }
}
