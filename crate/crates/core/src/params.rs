//! Flat parameter storage with named, typed handles.
//!
//! All learnable arrays live in one contiguous buffer. The [`Layout`] maps
//! each array to a name, shape, offset and partition; the encoders address
//! arrays through [`ArrayId`] handles grouped into [`TextIds`], [`VisionIds`]
//! and [`MapIds`].

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{all_finite, Real};

/// Which sub-network an array belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// The text encoder, frozen in the two pre-training stages.
    Text,
    /// The ViT image tokenizer.
    Vision,
    /// Image-to-pseudo-token map used by the pseudo-token baseline.
    PseudoMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArrayId(pub(crate) usize);

impl ArrayId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub partition: Partition,
    init: Init,
}

/// Handles for one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockIds {
    pub ln1_g: ArrayId,
    pub ln1_b: ArrayId,
    pub w_q: ArrayId,
    pub b_q: ArrayId,
    pub w_k: ArrayId,
    pub b_k: ArrayId,
    pub w_v: ArrayId,
    pub b_v: ArrayId,
    pub w_o: ArrayId,
    pub b_o: ArrayId,
    pub ln2_g: ArrayId,
    pub ln2_b: ArrayId,
    pub w_ff1: ArrayId,
    pub b_ff1: ArrayId,
    pub w_ff2: ArrayId,
    pub b_ff2: ArrayId,
}

#[derive(Debug, Clone)]
pub struct TextIds {
    pub tok_emb: ArrayId,
    pub pos_emb: ArrayId,
    pub cls: ArrayId,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ArrayId,
    pub lnf_b: ArrayId,
}

#[derive(Debug, Clone)]
pub struct VisionIds {
    pub patch_w: ArrayId,
    pub patch_b: ArrayId,
    pub pos_emb: ArrayId,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ArrayId,
    pub lnf_b: ArrayId,
    pub proj: Option<(ArrayId, ArrayId)>,
}

#[derive(Debug, Clone)]
pub struct MapIds {
    pub layers: Vec<(ArrayId, ArrayId)>,
}

#[derive(Debug)]
pub struct Layout {
    arrays: Vec<ArraySpec>,
    total: usize,
    pub text: TextIds,
    pub vision: VisionIds,
    pub map: MapIds,
}

struct Builder {
    arrays: Vec<ArraySpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], partition: Partition, init: Init) -> ArrayId {
        let len = shape.iter().product();
        let id = ArrayId(self.arrays.len());
        self.arrays.push(ArraySpec { name, shape: shape.to_vec(), offset: self.total, len, partition, init });
        self.total += len;
        id
    }

    fn block(&mut self, prefix: &str, d: usize, ff: usize, part: Partition) -> BlockIds {
        let wd = Init::Normal(1.0 / (d as f64).sqrt());
        let wf = Init::Normal(1.0 / (ff as f64).sqrt());
        let mut a = |n: &str, s: &[usize], i: Init| self.add(format!("{prefix}.{n}"), s, part, i);
        BlockIds {
            ln1_g: a("ln1.gamma", &[d], Init::Ones),
            ln1_b: a("ln1.beta", &[d], Init::Zeros),
            w_q: a("attn.q.weight", &[d, d], wd),
            b_q: a("attn.q.bias", &[d], Init::Zeros),
            w_k: a("attn.k.weight", &[d, d], wd),
            b_k: a("attn.k.bias", &[d], Init::Zeros),
            w_v: a("attn.v.weight", &[d, d], wd),
            b_v: a("attn.v.bias", &[d], Init::Zeros),
            w_o: a("attn.out.weight", &[d, d], wd),
            b_o: a("attn.out.bias", &[d], Init::Zeros),
            ln2_g: a("ln2.gamma", &[d], Init::Ones),
            ln2_b: a("ln2.beta", &[d], Init::Zeros),
            w_ff1: a("ffn.up.weight", &[d, ff], wd),
            b_ff1: a("ffn.up.bias", &[ff], Init::Zeros),
            w_ff2: a("ffn.down.weight", &[ff, d], wf),
            b_ff2: a("ffn.down.bias", &[d], Init::Zeros),
        }
    }
}

/// Standard deviation of learned position tables relative to content embeddings.
const POS_STD: f64 = 0.2;

impl Layout {
    pub fn new(config: &ModelConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.ffn_dim();
        let mut b = Builder { arrays: Vec::new(), total: 0 };

        let t = Partition::Text;
        let tok_emb = b.add("text.tok_emb".into(), &[config.vocab_size, d], t, Init::Normal(1.0));
        let pos_emb = b.add("text.pos_emb".into(), &[config.max_seq_len, d], t, Init::Normal(POS_STD));
        let cls = b.add("text.cls".into(), &[d], t, Init::Normal(1.0));
        let blocks = (0..config.n_text_layers).map(|i| b.block(&format!("text.layers.{i}"), d, ff, t)).collect();
        let lnf_g = b.add("text.ln_f.gamma".into(), &[d], t, Init::Ones);
        let lnf_b = b.add("text.ln_f.beta".into(), &[d], t, Init::Zeros);
        let text = TextIds { tok_emb, pos_emb, cls, blocks, lnf_g, lnf_b };

        let v = Partition::Vision;
        let pd = config.patch_dim();
        let patch_w = b.add("vision.patch.weight".into(), &[pd, d], v, Init::Normal(1.0 / (pd as f64).sqrt()));
        let patch_b = b.add("vision.patch.bias".into(), &[d], v, Init::Zeros);
        let vpos = b.add("vision.pos_emb".into(), &[config.n_patches(), d], v, Init::Normal(POS_STD));
        let vblocks = (0..config.n_vit_layers).map(|i| b.block(&format!("vision.layers.{i}"), d, ff, v)).collect();
        let vlnf_g = b.add("vision.ln_f.gamma".into(), &[d], v, Init::Ones);
        let vlnf_b = b.add("vision.ln_f.beta".into(), &[d], v, Init::Zeros);
        let proj = config.vision_projector.then(|| {
            (
                b.add("vision.proj.weight".into(), &[d, d], v, Init::Normal(1.0 / (d as f64).sqrt())),
                b.add("vision.proj.bias".into(), &[d], v, Init::Zeros),
            )
        });
        let vision = VisionIds {
            patch_w,
            patch_b,
            pos_emb: vpos,
            blocks: vblocks,
            lnf_g: vlnf_g,
            lnf_b: vlnf_b,
            proj,
        };

        let m = Partition::PseudoMap;
        let layers = (0..config.pseudo_map_depth)
            .map(|i| {
                (
                    b.add(format!("pseudo.layers.{i}.weight"), &[d, d], m, Init::Normal(1.0 / (d as f64).sqrt())),
                    b.add(format!("pseudo.layers.{i}.bias"), &[d], m, Init::Zeros),
                )
            })
            .collect();

        Ok(Arc::new(Layout { arrays: b.arrays, total: b.total, text, vision, map: MapIds { layers } }))
    }

    pub fn arrays(&self) -> &[ArraySpec] {
        &self.arrays
    }

    pub fn spec(&self, id: ArrayId) -> &ArraySpec {
        &self.arrays[id.0]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<ArrayId> {
        self.arrays.iter().position(|a| a.name == name).map(ArrayId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ArrayId> {
        (0..self.arrays.len()).map(ArrayId)
    }
}

/// Every learnable array of the model plus its trainable mask.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    layout: Arc<Layout>,
    data: Vec<F>,
    trainable: Vec<bool>,
}

impl<F: Real> ModelParams<F> {
    /// Random initialisation; vision and nothing else is trainable.
    pub fn init<R: Rng>(layout: Arc<Layout>, rng: &mut R) -> Self {
        let mut data = vec![F::ZERO; layout.total];
        for a in &layout.arrays {
            let slot = &mut data[a.offset..a.offset + a.len];
            match a.init {
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|v| *v = F::ONE),
                Init::Normal(std) => {
                    for v in slot.iter_mut() {
                        // Round through f32 so f32 and f64 models start identical.
                        *v = F::from_f64(({ let z: f64 = StandardNormal.sample(rng); z } * std) as f32 as f64);
                    }
                }
            }
        }
        let trainable = layout.arrays.iter().map(|a| a.partition == Partition::Vision).collect();
        ModelParams { layout, data, trainable }
    }

    pub fn from_parts(layout: Arc<Layout>, data: Vec<F>, trainable: Vec<bool>) -> Result<Self> {
        if data.len() != layout.total || trainable.len() != layout.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "parameter buffer has {} values / {} flags, layout needs {} / {}",
                data.len(),
                trainable.len(),
                layout.total,
                layout.arrays.len()
            )));
        }
        Ok(ModelParams { layout, data, trainable })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    #[inline]
    pub fn get(&self, id: ArrayId) -> &[F] {
        let a = &self.layout.arrays[id.0];
        &self.data[a.offset..a.offset + a.len]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ArrayId) -> &mut [F] {
        let a = &self.layout.arrays[id.0];
        &mut self.data[a.offset..a.offset + a.len]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_trainable(&self, id: ArrayId) -> bool {
        self.trainable[id.0]
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_trainable(&mut self, partition: Partition, on: bool) {
        for (flag, a) in self.trainable.iter_mut().zip(&self.layout.arrays) {
            if a.partition == partition {
                *flag = on;
            }
        }
    }

    /// Makes exactly the listed partitions trainable.
    pub fn train_only(&mut self, partitions: &[Partition]) {
        for (flag, a) in self.trainable.iter_mut().zip(&self.layout.arrays) {
            *flag = partitions.contains(&a.partition);
        }
    }

    pub fn partition_trainable(&self, partition: Partition) -> bool {
        self.layout.arrays.iter().zip(&self.trainable).any(|(a, t)| *t && a.partition == partition)
    }

    pub fn partition_values(&self, partition: Partition) -> Vec<F> {
        self.layout
            .arrays
            .iter()
            .filter(|a| a.partition == partition)
            .flat_map(|a| self.data[a.offset..a.offset + a.len].iter().copied())
            .collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        for a in &self.layout.arrays {
            if !all_finite(&self.data[a.offset..a.offset + a.len]) {
                return Err(Error::NonFinite(a.name.clone()));
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Gradient buffers, allocated only for arrays that were trainable when the
/// buffer was created.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    layout: Arc<Layout>,
    slots: Vec<Option<usize>>,
    buf: Vec<F>,
}

impl<F: Real> Gradients<F> {
    pub fn for_params(params: &ModelParams<F>) -> Self {
        Self::for_mask(params.layout.clone(), &params.trainable)
    }

    pub fn for_mask(layout: Arc<Layout>, mask: &[bool]) -> Self {
        let mut slots = Vec::with_capacity(layout.arrays.len());
        let mut total = 0;
        for (a, &t) in layout.arrays.iter().zip(mask) {
            if t {
                slots.push(Some(total));
                total += a.len;
            } else {
                slots.push(None);
            }
        }
        Gradients { layout, slots, buf: vec![F::ZERO; total] }
    }

    #[inline]
    pub fn wants(&self, id: ArrayId) -> bool {
        self.slots[id.0].is_some()
    }

    #[inline]
    pub fn get(&self, id: ArrayId) -> Option<&[F]> {
        let len = self.layout.arrays[id.0].len;
        self.slots[id.0].map(|o| &self.buf[o..o + len])
    }

    #[inline]
    pub fn get_mut(&mut self, id: ArrayId) -> Option<&mut [F]> {
        let len = self.layout.arrays[id.0].len;
        self.slots[id.0].map(move |o| &mut self.buf[o..o + len])
    }

    /// Mutable access to two distinct arrays at once.
    pub fn pair_mut(&mut self, a: ArrayId, b: ArrayId) -> (Option<&mut [F]>, Option<&mut [F]>) {
        assert_ne!(a, b);
        let la = self.layout.arrays[a.0].len;
        let lb = self.layout.arrays[b.0].len;
        match (self.slots[a.0], self.slots[b.0]) {
            (None, None) => (None, None),
            (Some(oa), None) => (Some(&mut self.buf[oa..oa + la]), None),
            (None, Some(ob)) => (None, Some(&mut self.buf[ob..ob + lb])),
            (Some(oa), Some(ob)) => {
                if oa < ob {
                    let (lo, hi) = self.buf.split_at_mut(ob);
                    (Some(&mut lo[oa..oa + la]), Some(&mut hi[..lb]))
                } else {
                    let (lo, hi) = self.buf.split_at_mut(oa);
                    (Some(&mut hi[..la]), Some(&mut lo[ob..ob + lb]))
                }
            }
        }
    }

    /// Arrays holding gradient storage, in layout order.
    pub fn entries(&self) -> impl Iterator<Item = (ArrayId, &ArraySpec, &[F])> {
        self.layout.arrays.iter().enumerate().filter_map(move |(i, a)| {
            self.slots[i].map(|o| (ArrayId(i), a, &self.buf[o..o + a.len]))
        })
    }

    pub fn entries_mut(&mut self) -> Vec<(ArrayId, &mut [F])> {
        let mut out = Vec::new();
        let mut rest: &mut [F] = &mut self.buf;
        for (i, a) in self.layout.arrays.iter().enumerate() {
            if self.slots[i].is_some() {
                let (head, tail) = std::mem::take(&mut rest).split_at_mut(a.len);
                out.push((ArrayId(i), head));
                rest = tail;
            }
        }
        out
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// `self += other`, array by array in layout order.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        assert_eq!(self.slots, other.slots, "gradient layouts differ");
        for (d, s) in self.buf.iter_mut().zip(&other.buf) {
            *d += *s;
        }
    }

    /// Adds `other` into the arrays both buffers hold. `other` must not carry
    /// arrays this buffer lacks.
    pub fn add_subset(&mut self, other: &Gradients<F>) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(o) = slot {
                let len = self.layout.arrays[i].len;
                let d = self.slots[i].expect("gradient subset carries an array the target lacks");
                for (a, b) in self.buf[d..d + len].iter_mut().zip(&other.buf[*o..o + len]) {
                    *a += *b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in self.buf.iter_mut() {
            *v *= s;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.buf.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (_, spec, g) in self.entries() {
            if !all_finite(g) {
                return Err(Error::NonFinite(format!("gradient of {}", spec.name)));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}
