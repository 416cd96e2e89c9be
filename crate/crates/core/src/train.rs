//! Contrastive training stages, batch construction and the optimizer.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{forward_with_gradients, sample_masks, EncodeBatch, Item, LossHead, LossSpec};
use crate::config::TokenOrder;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::loss::LossForm;
use crate::model::Model;
use crate::params::{Gradients, ModelParams, Partition};
use crate::rng::{indexed_stream, Stream};
use crate::tensor::Real;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Stage1,
    Stage2,
    Finetune,
    /// Trains only the image-to-pseudo-token map.
    PseudoMap,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Finetune => "finetune",
            Stage::PseudoMap => "pseudo_map",
        }
    }

    pub fn trainable(self) -> &'static [Partition] {
        match self {
            Stage::Stage1 | Stage::Stage2 => &[Partition::Vision],
            Stage::Finetune => &[Partition::Text, Partition::Vision],
            Stage::PseudoMap => &[Partition::PseudoMap],
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(Stage::Stage1),
            "2" | "stage2" => Ok(Stage::Stage2),
            "finetune" => Ok(Stage::Finetune),
            "pseudo_map" => Ok(Stage::PseudoMap),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    CrossModal,
    It2i,
    T2it,
    Finetune,
}

impl TaskTag {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::CrossModal => "cross_modal",
            TaskTag::It2i => "it2i",
            TaskTag::T2it => "t2it",
            TaskTag::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub tau: f64,
    pub lr_init: f64,
    pub total_steps: usize,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub mask_ratio_stage1: f64,
    /// Trailing stage-1 steps run without masking; `None` means 30% of
    /// `total_steps`.
    pub unmasked_steps: Option<usize>,
    pub hard_negatives_per_query: usize,
    /// Stage-2 and fine-tuning task mix, visited round-robin.
    pub tasks: Vec<TaskTag>,
    pub bidirectional: bool,
    pub loss_form: LossForm,
    pub token_order: TokenOrder,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Stage1,
            tau: 0.02,
            lr_init: 2e-5,
            total_steps: 600,
            schedule: Schedule::LinearDecay,
            batch_size: 16,
            mask_ratio_stage1: 0.5,
            unmasked_steps: None,
            hard_negatives_per_query: 3,
            tasks: vec![TaskTag::It2i, TaskTag::T2it],
            bidirectional: false,
            loss_form: LossForm::Log,
            token_order: TokenOrder::VisualFirst,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio_stage1) {
            return bad(format!("mask_ratio_stage1 {} not in [0, 1)", self.mask_ratio_stage1));
        }
        if self.unmasked_steps.is_some_and(|u| u > self.total_steps) {
            return bad("unmasked_steps exceeds total_steps".into());
        }
        if matches!(self.stage, Stage::Stage2 | Stage::Finetune) {
            if self.tasks.is_empty() {
                return bad("tasks must not be empty".into());
            }
            if let Some(t) = self.tasks.iter().find(|t| !matches!(t, TaskTag::It2i | TaskTag::T2it)) {
                return bad(format!("task {} cannot drive {}", t.as_str(), self.stage));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("invalid optimizer moments".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    pub fn unmasked_steps(&self) -> usize {
        self.unmasked_steps.unwrap_or(self.total_steps - (self.total_steps as f64 * 0.7).round() as usize)
    }

    /// Mask ratio for a stage-1 step: masked first, unmasked for the tail.
    pub fn mask_ratio_at(&self, step: usize) -> f64 {
        if self.stage == Stage::Stage1 && step < self.total_steps - self.unmasked_steps() {
            self.mask_ratio_stage1
        } else {
            0.0
        }
    }

    pub fn task_at(&self, step: usize) -> TaskTag {
        match self.stage {
            Stage::Stage1 | Stage::PseudoMap => TaskTag::CrossModal,
            Stage::Stage2 | Stage::Finetune => self.tasks[step % self.tasks.len()],
        }
    }
}

/// Linearly decayed learning rate.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps || cfg.total_steps == 0 {
        return Err(Error::InvalidArgument(format!("step {step} outside 0..={}", cfg.total_steps)));
    }
    match cfg.schedule {
        Schedule::LinearDecay => Ok((cfg.lr_init * (1.0 - step as f64 / cfg.total_steps as f64)).max(0.0)),
    }
}

// ---- optimizer ----

/// AdamW moments over the whole parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub t: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(n: usize) -> Self {
        OptimizerState { t: 0, m: vec![F::ZERO; n], v: vec![F::ZERO; n] }
    }

    pub fn for_params(p: &ModelParams<F>) -> Self {
        Self::new(p.data().len())
    }
}

/// One AdamW update of a single array; `t` is the already incremented step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<F: Real>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].to_f64();
        let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
        let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
        m[i] = F::from_f64(mi);
        v[i] = F::from_f64(vi);
        let p = param[i].to_f64();
        let update = (mi / c1) / ((vi / c2).sqrt() + cfg.eps) + cfg.weight_decay * p;
        param[i] = F::from_f64(p - lr * update);
    }
}

/// Clips `grads` to the configured global norm and applies AdamW to every
/// array that has a gradient. A gradient for a frozen array is an error.
pub fn optimizer_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &mut Gradients<F>,
    lr: f64,
    state: &mut OptimizerState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != params.data().len() {
        return Err(Error::shape(format!("{} optimizer slots", params.data().len()), state.m.len().to_string()));
    }
    for (id, spec, _) in grads.entries() {
        if !params.is_trainable(id) {
            return Err(Error::FrozenGradient(spec.name.clone()));
        }
    }
    grads.check_finite()?;
    let norm = grads.global_norm();
    if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        grads.scale(F::from_f64(cfg.grad_clip / norm));
    }
    state.t += 1;
    let layout = params.layout().clone();
    for (id, g) in grads.entries_mut() {
        let spec = layout.spec(id);
        let range = spec.offset..spec.offset + spec.len;
        let p = &mut params.data_mut()[range.clone()];
        adamw_update(p, g, &mut state.m[range.clone()], &mut state.v[range], state.t, lr, cfg);
        if !crate::tensor::all_finite(p) {
            return Err(Error::NonFinite(format!("update of {}", spec.name)));
        }
    }
    Ok(())
}

// ---- training data ----

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPair {
    pub image: ImageGrid,
    pub caption: TokenSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditExample {
    pub key: u64,
    pub instruction: TokenSequence,
    pub target: ImageGrid,
}

/// One source image with several single-attribute edits. Each edit's
/// siblings and the unedited source are its hard negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EditGroup {
    pub source_key: u64,
    pub source: ImageGrid,
    pub edits: Vec<EditExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocRecord {
    pub key: u64,
    pub query: TokenSequence,
    pub image: ImageGrid,
    pub text: TokenSequence,
}

/// Documents that share a topic; each member is a hard negative for the
/// others' queries.
#[derive(Debug, Clone, PartialEq)]
pub struct DocGroup {
    pub records: Vec<DocRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainData {
    pub pairs: Vec<CaptionPair>,
    pub edit_groups: Vec<EditGroup>,
    pub doc_groups: Vec<DocGroup>,
}

/// An encodable input whose images live in the batch's image table.
#[derive(Debug, Clone)]
pub enum Input {
    Text(TokenSequence),
    Image(ImageGrid),
    Composed(ImageGrid, TokenSequence),
}

#[derive(Debug, Clone)]
pub struct Candidate {
    /// Identity used to merge duplicate pool entries.
    pub key: u64,
    pub input: Input,
}

/// Queries with aligned positives and per-query hard negatives.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub task: TaskTag,
    pub queries: Vec<Input>,
    pub positives: Vec<Candidate>,
    pub hard_negatives: Vec<Vec<Candidate>>,
}

struct Assembler<F> {
    batch: EncodeBatch<F>,
    order: TokenOrder,
}

impl<F> Assembler<F> {
    fn push(&mut self, input: &Input) -> usize {
        let item = match input {
            Input::Text(t) => Item::Text(t.clone()),
            Input::Image(img) => Item::Image(self.batch.add_image(img.clone())),
            Input::Composed(img, t) => {
                Item::Composed { image: self.batch.add_image(img.clone()), text: t.clone(), order: self.order }
            }
        };
        self.batch.add(item)
    }
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Lays the batch out as items plus the pooled loss: pool = every
    /// positive and every hard negative, merged by key, positives first.
    pub fn assemble<F>(&self, cfg: &TrainConfig) -> Result<(EncodeBatch<F>, LossSpec)> {
        if self.positives.len() != self.queries.len() || self.hard_negatives.len() > self.queries.len() {
            return Err(Error::InvalidArgument("batch queries and candidates are not aligned".into()));
        }
        let no_negatives = self.hard_negatives.iter().all(Vec::is_empty);
        if self.queries.is_empty() || (no_negatives && self.queries.len() < 2) {
            return Err(Error::InvalidArgument(format!("batch of {} is too small", self.queries.len())));
        }
        for (pos, negs) in self.positives.iter().zip(&self.hard_negatives) {
            if negs.iter().any(|n| n.key == pos.key) {
                return Err(Error::InvalidArgument(format!("hard negative {} equals the positive", pos.key)));
            }
        }
        let mut asm = Assembler { batch: EncodeBatch::new(), order: cfg.token_order };
        let queries: Vec<usize> = self.queries.iter().map(|q| asm.push(q)).collect();
        let mut pool = Vec::new();
        let mut by_key: HashMap<u64, usize> = HashMap::new();
        let mut add = |asm: &mut Assembler<F>, c: &Candidate| -> usize {
            *by_key.entry(c.key).or_insert_with(|| {
                pool.push(asm.push(&c.input));
                pool.len() - 1
            })
        };
        let positives: Vec<usize> = self.positives.iter().map(|c| add(&mut asm, c)).collect();
        for negs in &self.hard_negatives {
            for c in negs {
                add(&mut asm, c);
            }
        }
        let head = LossHead::Pooled { queries, pool, positives, bidirectional: cfg.bidirectional };
        Ok((asm.batch, LossSpec { head, tau: cfg.tau, form: cfg.loss_form }))
    }
}

fn distinct_indices<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::InvalidArgument(format!("need {k} distinct examples, only {n} available")));
    }
    Ok(rand::seq::index::sample(rng, n, k).into_vec())
}

/// `batch_size` distinct caption pairs.
pub fn sample_pairs<'a, R: Rng>(data: &'a TrainData, batch_size: usize, rng: &mut R) -> Result<Vec<&'a CaptionPair>> {
    Ok(distinct_indices(data.pairs.len(), batch_size, rng)?.into_iter().map(|i| &data.pairs[i]).collect())
}

/// Composed-image batch: one random edit from each of `batch_size`
/// distinct groups. Its hard negatives are sibling targets in random order
/// followed by the unedited source, cut to `hard_negatives`.
pub fn sample_it2i<R: Rng>(groups: &[EditGroup], batch_size: usize, hard_negatives: usize, rng: &mut R) -> Result<TrainingBatch> {
    let mut b = TrainingBatch { task: TaskTag::It2i, queries: vec![], positives: vec![], hard_negatives: vec![] };
    let target = |e: &EditExample| Candidate { key: e.key, input: Input::Image(e.target.clone()) };
    for gi in distinct_indices(groups.len(), batch_size, rng)? {
        let g = &groups[gi];
        if g.edits.is_empty() {
            return Err(Error::InvalidArgument("edit group without edits".into()));
        }
        let i = rng.gen_range(0..g.edits.len());
        let e = &g.edits[i];
        let mut negs = Vec::new();
        if hard_negatives > 0 {
            let mut siblings: Vec<usize> = (0..g.edits.len()).filter(|&j| j != i).collect();
            siblings.shuffle(rng);
            negs.extend(siblings.iter().map(|&j| target(&g.edits[j])));
            negs.push(Candidate { key: g.source_key, input: Input::Image(g.source.clone()) });
            negs.truncate(hard_negatives);
        }
        b.queries.push(Input::Composed(g.source.clone(), e.instruction.clone()));
        b.positives.push(target(e));
        b.hard_negatives.push(negs);
    }
    Ok(b)
}

/// Text-query to composed-document batch: one random document from each of
/// `batch_size` distinct groups, with `hard_negatives` random other
/// members of its group.
pub fn sample_t2it<R: Rng>(groups: &[DocGroup], batch_size: usize, hard_negatives: usize, rng: &mut R) -> Result<TrainingBatch> {
    let mut b = TrainingBatch { task: TaskTag::T2it, queries: vec![], positives: vec![], hard_negatives: vec![] };
    let doc = |r: &DocRecord| Candidate { key: r.key, input: Input::Composed(r.image.clone(), r.text.clone()) };
    for gi in distinct_indices(groups.len(), batch_size, rng)? {
        let recs = &groups[gi].records;
        if recs.is_empty() {
            return Err(Error::InvalidArgument("empty document group".into()));
        }
        let i = rng.gen_range(0..recs.len());
        let mut others: Vec<usize> = (0..recs.len()).filter(|&j| j != i).collect();
        others.shuffle(rng);
        b.queries.push(Input::Text(recs[i].query.clone()));
        b.positives.push(doc(&recs[i]));
        b.hard_negatives.push(others.iter().take(hard_negatives).map(|&j| doc(&recs[j])).collect());
    }
    Ok(b)
}

// ---- steps ----

fn require_stage(cfg: &TrainConfig, allowed: &[Stage]) -> Result<()> {
    if allowed.contains(&cfg.stage) {
        Ok(())
    } else {
        Err(Error::Config(format!("step function does not run stage {}", cfg.stage)))
    }
}

fn apply<F: Real>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    batch: &EncodeBatch<F>,
    loss: &LossSpec,
    kept: &[Vec<usize>],
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let lr = lr_at(step, cfg)?;
    let mut out = forward_with_gradients(model, batch, loss, kept)?;
    optimizer_step(&mut model.params, &mut out.grads, lr, opt, cfg)?;
    Ok(out.loss)
}

/// Stage-1 items and loss: captions and images paired by index, symmetric loss.
pub fn stage1_batch<F>(pairs: &[&CaptionPair], cfg: &TrainConfig) -> Result<(EncodeBatch<F>, LossSpec)> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!("stage-1 batch of {} is too small", pairs.len())));
    }
    let mut b = EncodeBatch::new();
    let texts: Vec<usize> = pairs.iter().map(|p| b.add(Item::Text(p.caption.clone()))).collect();
    let images: Vec<usize> = pairs
        .iter()
        .map(|p| {
            let i = b.add_image(p.image.clone());
            b.add(Item::Image(i))
        })
        .collect();
    Ok((b, LossSpec { head: LossHead::Symmetric { left: texts, right: images }, tau: cfg.tau, form: cfg.loss_form }))
}

/// One stage-1 update: masks visual tokens according to the schedule and
/// trains only the vision tokenizer. Returns the pre-update loss.
pub fn stage1_step<F: Real, R: Rng>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    pairs: &[&CaptionPair],
    cfg: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<f64> {
    require_stage(cfg, &[Stage::Stage1])?;
    model.params.train_only(Stage::Stage1.trainable());
    let (batch, loss) = stage1_batch(pairs, cfg)?;
    let kept = sample_masks(batch.images.len(), model.config.n_patches(), cfg.mask_ratio_at(step), rng)?;
    apply(model, opt, &batch, &loss, &kept, cfg, step)
}

fn full_masks(n_images: usize, n_patches: usize) -> Vec<Vec<usize>> {
    vec![(0..n_patches).collect(); n_images]
}

/// One stage-2 update over a composed-retrieval batch; vision only.
pub fn stage2_step<F: Real>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    require_stage(cfg, &[Stage::Stage2])?;
    pooled_step(model, opt, batch, cfg, step)
}

/// Supervised fine-tuning: the stage-2 loss with every encoder parameter trainable.
pub fn finetune_step<F: Real>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    require_stage(cfg, &[Stage::Finetune])?;
    pooled_step(model, opt, batch, cfg, step)
}

fn pooled_step<F: Real>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    model.params.train_only(cfg.stage.trainable());
    let (enc, loss) = batch.assemble(cfg)?;
    let kept = full_masks(enc.images.len(), model.config.n_patches());
    apply(model, opt, &enc, &loss, &kept, cfg, step)
}

/// Pseudo-token map items and loss: `[CLS; "a photo of"; map(image)]`
/// against the caption, symmetric.
pub fn pseudo_map_batch<F>(pairs: &[&CaptionPair], cfg: &TrainConfig) -> Result<(EncodeBatch<F>, LossSpec)> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!("batch of {} is too small", pairs.len())));
    }
    let mut b = EncodeBatch::new();
    let texts: Vec<usize> = pairs.iter().map(|p| b.add(Item::Text(p.caption.clone()))).collect();
    let pseudo: Vec<usize> = pairs
        .iter()
        .map(|p| {
            let i = b.add_image(p.image.clone());
            b.add(Item::PseudoToken { image: i, text: None })
        })
        .collect();
    Ok((b, LossSpec { head: LossHead::Symmetric { left: pseudo, right: texts }, tau: cfg.tau, form: cfg.loss_form }))
}

pub fn pseudo_map_step<F: Real>(
    model: &mut Model<F>,
    opt: &mut OptimizerState<F>,
    pairs: &[&CaptionPair],
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    require_stage(cfg, &[Stage::PseudoMap])?;
    model.params.train_only(Stage::PseudoMap.trainable());
    let (batch, loss) = pseudo_map_batch(pairs, cfg)?;
    let kept = full_masks(batch.images.len(), model.config.n_patches());
    apply(model, opt, &batch, &loss, &kept, cfg, step)
}

// ---- trainer ----

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub task: TaskTag,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for StepLog {
    /// `step task lr loss` with 9 significant digits for the reals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} task={} lr={:.8e} loss={:.8e}", self.step, self.task.as_str(), self.lr, self.loss)
    }
}

/// Model, optimizer state and progress of one training stage.
#[derive(Debug, Clone)]
pub struct Trainer<F: Real> {
    pub model: Model<F>,
    pub cfg: TrainConfig,
    pub opt: OptimizerState<F>,
    /// Number of completed steps.
    pub step: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new(mut model: Model<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.params.train_only(cfg.stage.trainable());
        let opt = OptimizerState::for_params(&model.params);
        Ok(Trainer { model, cfg, opt, step: 0 })
    }

    pub fn resume(mut model: Model<F>, cfg: TrainConfig, opt: OptimizerState<F>, step: usize) -> Result<Self> {
        cfg.validate()?;
        if step > cfg.total_steps {
            return Err(Error::Checkpoint(format!("checkpoint at step {step} is past total_steps {}", cfg.total_steps)));
        }
        if opt.m.len() != model.params.data().len() || opt.v.len() != opt.m.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        model.params.train_only(cfg.stage.trainable());
        Ok(Trainer { model, cfg, opt, step })
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Runs step `self.step` with its own batching and masking streams,
    /// so an interrupted run resumes exactly.
    pub fn step_once(&mut self, data: &TrainData) -> Result<StepLog> {
        let step = self.step;
        let cfg = &self.cfg;
        let lr = lr_at(step, cfg)?;
        let task = cfg.task_at(step);
        let mut batch_rng = indexed_stream(cfg.seed, Stream::Batching, step as u64);
        let mut mask_rng = indexed_stream(cfg.seed, Stream::Masking, step as u64);
        let hn = cfg.hard_negatives_per_query;
        let loss = match cfg.stage {
            Stage::Stage1 => {
                let pairs = sample_pairs(data, cfg.batch_size, &mut batch_rng)?;
                stage1_step(&mut self.model, &mut self.opt, &pairs, cfg, step, &mut mask_rng)?
            }
            Stage::PseudoMap => {
                let pairs = sample_pairs(data, cfg.batch_size, &mut batch_rng)?;
                pseudo_map_step(&mut self.model, &mut self.opt, &pairs, cfg, step)?
            }
            Stage::Stage2 | Stage::Finetune => {
                let batch = match task {
                    TaskTag::It2i => sample_it2i(&data.edit_groups, cfg.batch_size, hn, &mut batch_rng)?,
                    _ => sample_t2it(&data.doc_groups, cfg.batch_size, hn, &mut batch_rng)?,
                };
                pooled_step(&mut self.model, &mut self.opt, &batch, cfg, step)?
            }
        };
        self.step += 1;
        Ok(StepLog { step, task, lr, loss })
    }

    /// Runs until `total_steps`, calling `after` once per completed step.
    pub fn run<C>(&mut self, data: &TrainData, mut after: C) -> Result<()>
    where
        C: FnMut(&StepLog, &Trainer<F>) -> Result<()>,
    {
        while !self.done() {
            let log = self.step_once(data)?;
            after(&log, self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backprop::batch_loss;
    use crate::testutil::{random_image, rng, seq, tiny_model};

    fn stage(stage: Stage) -> TrainConfig {
        TrainConfig { stage, lr_init: 1e-3, total_steps: 10, batch_size: 2, ..TrainConfig::default() }
    }

    #[test]
    fn learning_rate_decays_linearly() {
        let cfg = TrainConfig { total_steps: 1000, ..TrainConfig::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 2e-5);
        assert_eq!(lr_at(1000, &cfg).unwrap(), 0.0);
        assert!((lr_at(500, &cfg).unwrap() - 1e-5).abs() < 1e-20);
        assert!(lr_at(1001, &cfg).is_err());
    }

    #[test]
    fn masking_covers_the_leading_seventy_percent() {
        let cfg = TrainConfig { total_steps: 10, ..TrainConfig::default() };
        let ratios: Vec<f64> = (0..10).map(|s| cfg.mask_ratio_at(s)).collect();
        assert_eq!(ratios, [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0]);
        let stage2 = TrainConfig { stage: Stage::Stage2, ..cfg };
        assert_eq!(stage2.mask_ratio_at(0), 0.0);
    }

    #[test]
    fn half_masking_keeps_eight_of_sixteen_patches() {
        let kept = sample_masks(3, 16, 0.5, &mut rng(1)).unwrap();
        assert!(kept.iter().all(|k| k.len() == 8 && k.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn zero_gradient_applies_only_weight_decay() {
        let cfg = TrainConfig::default();
        let mut p = vec![2.0f64, -1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert_eq!(p, vec![2.0 - 0.1 * 0.01 * 2.0, -1.0 + 0.1 * 0.01 * 1.0]);
    }

    #[test]
    fn scalar_adamw_matches_hand_recurrence() {
        let cfg = TrainConfig::default();
        let (lr, wd, b1, b2, eps) = (0.05f64, 0.01, 0.9f64, 0.999f64, 1e-8);
        let mut p = [0.7f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 1, lr, &cfg);
        adamw_update(&mut p, &[1.0], &mut m, &mut v, 2, lr, &cfg);

        let mut x = 0.7f64;
        let (mut mm, mut vv) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            mm = b1 * mm + (1.0 - b1);
            vv = b2 * vv + (1.0 - b2);
            let mhat = mm / (1.0 - b1.powi(t));
            let vhat = vv / (1.0 - b2.powi(t));
            x -= lr * (mhat / (vhat.sqrt() + eps) + wd * x);
        }
        assert!((p[0] - x).abs() < 1e-15, "{} vs {x}", p[0]);
    }

    #[test]
    fn gradient_for_frozen_array_is_rejected() {
        let mut model = tiny_model::<f64>(1);
        model.params.train_only(&[Partition::Vision]);
        let mask: Vec<bool> = model.layout().arrays().iter().map(|a| a.name == "text.cls").collect();
        let mut g = Gradients::for_mask(model.layout().clone(), &mask);
        let mut opt = OptimizerState::for_params(&model.params);
        let err = optimizer_step(&mut model.params, &mut g, 1e-3, &mut opt, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::FrozenGradient(ref n) if n == "text.cls"), "{err}");
    }

    fn pairs(seed: u64, n: usize) -> Vec<CaptionPair> {
        let mut r = rng(seed);
        let caps = [seq(&[1, 3]), seq(&[2, 4, 5]), seq(&[6, 7]), seq(&[3])];
        (0..n).map(|i| CaptionPair { image: random_image(8, &mut r), caption: caps[i % 4].clone() }).collect()
    }

    #[test]
    fn stage1_rejects_single_pair() {
        let mut model = tiny_model::<f64>(1);
        let mut opt = OptimizerState::for_params(&model.params);
        let p = pairs(1, 1);
        let refs: Vec<&CaptionPair> = p.iter().collect();
        assert!(stage1_step(&mut model, &mut opt, &refs, &stage(Stage::Stage1), 0, &mut rng(0)).is_err());
    }

    #[test]
    fn identical_embeddings_give_twice_ln_batch_in_stage1() {
        let p = pairs(1, 4);
        let refs: Vec<&CaptionPair> = p.iter().collect();
        let (_, spec) = stage1_batch::<f64>(&refs, &stage(Stage::Stage1)).unwrap();
        let emb = vec![vec![0.0, 1.0, 0.0]; 8];
        let (l, _) = spec.evaluate(&emb).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_stage1_step_descends_in_most_seeds() {
        let mut wins = 0;
        for seed in 0..5 {
            let mut model = tiny_model::<f64>(seed);
            let cfg = stage(Stage::Stage1);
            let p = pairs(seed + 100, 2);
            let refs: Vec<&CaptionPair> = p.iter().collect();
            let mut opt = OptimizerState::for_params(&model.params);
            let (b, spec) = stage1_batch::<f64>(&refs, &cfg).unwrap();
            let kept = vec![(0..4).collect::<Vec<_>>(); 2];
            let before = batch_loss(&model, &b, &spec, &kept).unwrap();
            let unmasked = TrainConfig { unmasked_steps: Some(10), ..cfg.clone() };
            let reported = stage1_step(&mut model, &mut opt, &refs, &unmasked, 0, &mut rng(0)).unwrap();
            assert!((reported - before).abs() < 1e-12);
            if batch_loss(&model, &b, &spec, &kept).unwrap() < before {
                wins += 1;
            }
        }
        assert!(wins >= 4, "descended in {wins} of 5 seeds");
    }

    fn edit_groups(n: usize, k: usize, seed: u64) -> Vec<EditGroup> {
        let mut r = rng(seed);
        (0..n)
            .map(|g| EditGroup {
                source_key: (g * 100) as u64,
                source: random_image(8, &mut r),
                edits: (0..k)
                    .map(|e| EditExample {
                        key: (g * 100 + e + 1) as u64,
                        instruction: seq(&[6, 7, 1 + e as u32]),
                        target: random_image(8, &mut r),
                    })
                    .collect(),
            })
            .collect()
    }

    fn pool_len(b: &TrainingBatch, cfg: &TrainConfig) -> usize {
        match b.assemble::<f64>(cfg).unwrap().1.head {
            LossHead::Pooled { pool, .. } => pool.len(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn hard_negatives_extend_the_pool() {
        let groups = edit_groups(4, 4, 1);
        let cfg = stage(Stage::Stage2);
        // queries from different groups, so every hard negative is distinct
        let mut b = sample_it2i(&groups, 2, 0, &mut rng(2)).unwrap();
        assert_eq!(pool_len(&b, &cfg), 2);
        let negs = |b: &TrainingBatch, n: usize| -> Vec<Vec<Candidate>> {
            (0..b.len())
                .map(|q| {
                    (0..n).map(|j| Candidate { key: 10_000 + (q * 100 + j) as u64, input: Input::Image(groups[0].source.clone()) }).collect()
                })
                .collect()
        };
        b.hard_negatives = negs(&b, 3);
        assert_eq!(pool_len(&b, &cfg), 8);
        b.hard_negatives = negs(&b, 9);
        assert_eq!(pool_len(&b, &cfg), 20);
    }

    #[test]
    fn hard_negative_equal_to_positive_is_rejected() {
        let groups = edit_groups(3, 3, 1);
        let mut b = sample_it2i(&groups, 2, 0, &mut rng(2)).unwrap();
        b.hard_negatives[0].push(b.positives[0].clone());
        assert!(b.assemble::<f64>(&stage(Stage::Stage2)).is_err());
    }

    #[test]
    fn hard_negatives_are_siblings_then_source() {
        let groups = edit_groups(4, 3, 1);
        let b = sample_it2i(&groups, 3, 3, &mut rng(4)).unwrap();
        assert_eq!(b.len(), 3);
        let mut seen = std::collections::HashSet::new();
        for (pos, negs) in b.positives.iter().zip(&b.hard_negatives) {
            assert!(seen.insert(pos.key / 100), "queries share a group");
            assert_eq!(negs.len(), 3);
            assert!(negs.iter().all(|n| n.key / 100 == pos.key / 100 && n.key != pos.key));
            assert_eq!(negs[2].key, pos.key / 100 * 100);
        }
        // three groups of 3 targets + 1 source each
        assert_eq!(pool_len(&b, &stage(Stage::Stage2)), 12);
        let one = sample_it2i(&groups, 3, 1, &mut rng(4)).unwrap();
        assert!(one.hard_negatives.iter().all(|n| n.len() == 1 && n[0].key % 100 != 0));
        assert!(sample_it2i(&groups, 5, 3, &mut rng(4)).is_err());
    }

    #[test]
    fn stage2_batch_of_identical_embeddings_gives_ln2() {
        let spec = LossSpec {
            head: LossHead::Pooled { queries: vec![0, 1], pool: vec![2, 3], positives: vec![0, 1], bidirectional: false },
            tau: 0.02,
            form: LossForm::Log,
        };
        let (l, _) = spec.evaluate(&vec![vec![1.0, 0.0]; 4]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_query_has_vanishing_pooled_loss() {
        let e = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        let spec = LossSpec {
            head: LossHead::Pooled { queries: vec![0], pool: vec![1, 2, 3], positives: vec![0], bidirectional: false },
            tau: 0.02,
            form: LossForm::Log,
        };
        let (l, _) = spec.evaluate(&[e(0), e(0), e(1), e(2)]).unwrap();
        assert!(l <= 1e-12);
    }

    fn run_pooled(stage_kind: Stage) -> (Model<f64>, Model<f64>) {
        let model = tiny_model::<f64>(2);
        let mut trained = model.clone();
        let cfg = TrainConfig { hard_negatives_per_query: 2, ..stage(stage_kind) };
        let groups = edit_groups(3, 3, 5);
        let b = sample_it2i(&groups, 3, 2, &mut rng(1)).unwrap();
        let mut opt = OptimizerState::for_params(&trained.params);
        pooled_step(&mut trained, &mut opt, &b, &cfg, 0).unwrap();
        (model, trained)
    }

    #[test]
    fn finetune_moves_text_encoder_but_stage2_does_not() {
        let (before, after) = run_pooled(Stage::Finetune);
        assert_ne!(before.params.partition_values(Partition::Text), after.params.partition_values(Partition::Text));
        let (before, after) = run_pooled(Stage::Stage2);
        assert_eq!(before.params.partition_values(Partition::Text), after.params.partition_values(Partition::Text));
        assert_ne!(before.params.partition_values(Partition::Vision), after.params.partition_values(Partition::Vision));
    }

    #[test]
    fn step_functions_check_the_stage() {
        let mut model = tiny_model::<f64>(2);
        let mut opt = OptimizerState::for_params(&model.params);
        let groups = edit_groups(3, 3, 5);
        let b = sample_it2i(&groups, 2, 0, &mut rng(1)).unwrap();
        assert!(stage2_step(&mut model, &mut opt, &b, &stage(Stage::Finetune), 0).is_err());
        assert!(finetune_step(&mut model, &mut opt, &b, &stage(Stage::Stage2), 0).is_err());
    }

    #[test]
    fn resumed_trainer_matches_uninterrupted_run() {
        let data = TrainData { pairs: pairs(9, 6), ..TrainData::default() };
        let cfg = TrainConfig { total_steps: 6, batch_size: 3, lr_init: 1e-2, ..stage(Stage::Stage1) };
        let mut full = Trainer::new(tiny_model::<f32>(4), cfg.clone()).unwrap();
        full.run(&data, |_, _| Ok(())).unwrap();

        let mut first = Trainer::new(tiny_model::<f32>(4), cfg.clone()).unwrap();
        for _ in 0..3 {
            first.step_once(&data).unwrap();
        }
        let mut resumed = Trainer::resume(first.model.clone(), cfg, first.opt.clone(), first.step).unwrap();
        resumed.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!(full.model.params.data(), resumed.model.params.data());
        assert_eq!(full.opt, resumed.opt);
    }

    #[test]
    fn step_log_has_nine_significant_digits() {
        let log = StepLog { step: 3, task: TaskTag::It2i, lr: 2e-5, loss: 0.6931471805599453 };
        assert_eq!(log.to_string(), "step=3 task=it2i lr=2.00000000e-5 loss=6.93147181e-1");
    }
}
