//! Procedural training and evaluation data: scenes, edit groups, documents,
//! similarity filtering and manifests.

pub mod docs;
pub mod edits;
pub mod manifest;
pub mod scene;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{indexed_stream, stream, Stream};

use docs::{generate_t2it_grouped, T2itRecord};
use edits::{generate_edits_with, EditKind};
use manifest::{ItemKind, Qrels, Record, Split};
use scene::{Background, Cell, Color, SceneObject, SceneSpec, Shape, Size};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub it2i_groups: usize,
    pub edits_per_group: usize,
    pub max_source_objects: usize,
    /// Sources are drawn in families: a random base scene plus
    /// single-attribute variants of it, each variant heading its own group.
    pub source_family_size: usize,
    pub t2it_records: usize,
    pub t2it_group_size: usize,
    /// Train, dev and test fractions, applied to whole groups.
    pub splits: [f64; 3],
    pub palette: Vec<Color>,
    /// Fraction of training edits dropped by the similarity filter.
    pub filter_drop_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            it2i_groups: 2000,
            edits_per_group: 3,
            max_source_objects: 3,
            source_family_size: 4,
            t2it_records: 2000,
            t2it_group_size: docs::DOC_GROUP_SIZE,
            splits: [0.9, 0.05, 0.05],
            palette: Color::ALL.to_vec(),
            filter_drop_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.it2i_groups == 0 || self.t2it_records == 0 {
            return bad("it2i_groups and t2it_records must be positive".into());
        }
        if self.edits_per_group < 2 {
            return bad(format!("edits_per_group must be at least 2, got {}", self.edits_per_group));
        }
        if !(1..=scene::MAX_OBJECTS - 1).contains(&self.max_source_objects) {
            return bad(format!("max_source_objects must be in 1..={}", scene::MAX_OBJECTS - 1));
        }
        if self.source_family_size == 0 {
            return bad("source_family_size must be positive".into());
        }
        if self.palette.len() < 2 {
            return bad("palette needs at least two colours".into());
        }
        let s: f64 = self.splits.iter().sum();
        if self.splits.iter().any(|f| *f < 0.0) || (s - 1.0).abs() > 1e-9 {
            return bad(format!("splits must be non-negative and sum to 1, got {:?}", self.splits));
        }
        if !(0.0..1.0).contains(&self.filter_drop_fraction) {
            return bad(format!("filter_drop_fraction {} not in [0, 1)", self.filter_drop_fraction));
        }
        Ok(())
    }
}

/// One composed-retrieval example: source image plus instruction, and the
/// edited target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct It2iRecord {
    pub id: String,
    pub group_id: String,
    pub kind: EditKind,
    pub source: SceneSpec,
    pub instruction: String,
    pub target: SceneSpec,
    pub split: Split,
}

impl It2iRecord {
    pub fn source_caption(&self) -> String {
        self.source.caption()
    }

    pub fn target_caption(&self) -> String {
        self.target.caption()
    }

    pub fn target_id(&self) -> String {
        self.id.replacen("-q", "-t", 1)
    }

    pub fn source_id(&self) -> String {
        format!("{}-src", self.group_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub it2i: Vec<It2iRecord>,
    pub t2it: Vec<(T2itRecord, Split)>,
}

fn random_scene<R: Rng>(palette: &[Color], max_objects: usize, rng: &mut R) -> Result<SceneSpec> {
    let n = rng.gen_range(1..=max_objects);
    let cells: Vec<Cell> = Cell::all().collect::<Vec<_>>().choose_multiple(rng, n).copied().collect();
    let objects = cells
        .into_iter()
        .map(|cell| SceneObject {
            shape: *Shape::ALL.choose(rng).expect("shapes"),
            color: *palette.choose(rng).expect("palette"),
            size: *Size::ALL.choose(rng).expect("sizes"),
            cell,
        })
        .collect();
    SceneSpec::new(*Background::ALL.choose(rng).expect("backgrounds"), objects)
}

/// Whole-group split assignment: a seeded shuffle, then the leading
/// fractions go to train and dev.
fn assign_splits(n_groups: usize, fractions: [f64; 3], seed: u64, salt: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.shuffle(&mut indexed_stream(seed, Stream::Split, salt));
    let n_train = (fractions[0] * n_groups as f64).round() as usize;
    let n_dev = ((fractions[1] * n_groups as f64).round() as usize).min(n_groups - n_train.min(n_groups));
    let mut out = vec![Split::Test; n_groups];
    for (rank, &g) in order.iter().enumerate() {
        out[g] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    out
}

/// Base scene plus `size - 1` distinct single-attribute variants, none
/// seen before.
fn source_family<R: Rng>(cfg: &DataConfig, size: usize, seen: &HashSet<SceneSpec>, rng: &mut R) -> Result<Vec<SceneSpec>> {
    for _ in 0..1000 {
        let base = random_scene(&cfg.palette, cfg.max_source_objects, rng)?;
        if seen.contains(&base) {
            continue;
        }
        let mut family = vec![base.clone()];
        if size > 1 {
            let variants = match generate_edits_with(&base, (size - 1).max(2), &cfg.palette, rng) {
                Ok(v) => v,
                Err(_) => continue,
            };
            family.extend(variants.into_iter().take(size - 1).map(|e| e.target));
        }
        if family.iter().all(|s| !seen.contains(s) && !s.objects().is_empty()) {
            return Ok(family);
        }
    }
    Err(Error::Scene("could not draw a fresh source family".into()))
}

/// Generates both datasets from one seed. Every composed-retrieval image
/// (sources and targets) is unique, so no (source, instruction) pair
/// repeats and no two corpus entries render the same.
pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let fam = cfg.source_family_size;
    let n_families = cfg.it2i_groups.div_ceil(fam);
    let family_splits = assign_splits(n_families, cfg.splits, seed, 0);
    let mut seen: HashSet<SceneSpec> = HashSet::new();
    let mut it2i = Vec::with_capacity(cfg.it2i_groups * cfg.edits_per_group);
    for f in 0..n_families {
        let mut rng = indexed_stream(seed, Stream::Data, f as u64);
        let size = fam.min(cfg.it2i_groups - f * fam);
        let sources = source_family(cfg, size, &seen, &mut rng)?;
        seen.extend(sources.iter().cloned());
        for (j, source) in sources.into_iter().enumerate() {
            let g = f * fam + j;
            let edits = (0..1000)
                .map(|_| generate_edits_with(&source, cfg.edits_per_group, &cfg.palette, &mut rng))
                .find(|r| r.as_ref().map_or(true, |es| es.iter().all(|e| !seen.contains(&e.target))))
                .ok_or_else(|| Error::Scene(format!("no fresh edits for {source}")))??;
            let group_id = format!("it2i-g{g:05}");
            for (e, edit) in edits.into_iter().enumerate() {
                seen.insert(edit.target.clone());
                it2i.push(It2iRecord {
                    id: format!("it2i-q{g:05}-{e}"),
                    group_id: group_id.clone(),
                    kind: edit.kind,
                    source: source.clone(),
                    instruction: edit.instruction,
                    target: edit.target,
                    split: family_splits[f],
                });
            }
        }
    }

    let mut rng = stream(seed, Stream::Data);
    let docs = generate_t2it_grouped(cfg.t2it_records, cfg.t2it_group_size, &cfg.palette, &mut rng)?;
    let n_doc_groups = docs.last().map_or(0, |_| docs.iter().map(|d| &d.group_id).collect::<HashSet<_>>().len());
    let doc_splits = assign_splits(n_doc_groups, cfg.splits, seed, 1);
    let mut t2it = Vec::with_capacity(docs.len());
    let mut group_index = 0;
    let mut last_group: Option<String> = None;
    for d in docs {
        if last_group.as_ref().is_some_and(|g| *g != d.group_id) {
            group_index += 1;
        }
        last_group = Some(d.group_id.clone());
        t2it.push((d, doc_splits[group_index]));
    }
    Ok(Dataset { it2i, t2it })
}

/// Manifests and judgments for both tasks plus the caption pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifests {
    pub pairs: Vec<Record>,
    pub it2i_queries: Vec<Record>,
    pub it2i_corpus: Vec<Record>,
    pub it2i_qrels: Qrels,
    pub t2it_queries: Vec<Record>,
    pub t2it_corpus: Vec<Record>,
    pub t2it_qrels: Qrels,
}

impl Dataset {
    pub fn manifests(&self) -> Manifests {
        let mut m = Manifests::default();
        let mut sources_done = HashSet::new();
        for r in &self.it2i {
            let group = Some(r.group_id.clone());
            if sources_done.insert(r.group_id.clone()) {
                m.it2i_corpus.push(Record {
                    id: r.source_id(),
                    kind: ItemKind::Image,
                    text: None,
                    image: Some(r.source.clone()),
                    group_id: group.clone(),
                    split: r.split,
                });
                m.pairs.push(Record {
                    id: format!("pair-{}", r.source_id()),
                    kind: ItemKind::ImageText,
                    text: Some(r.source_caption()),
                    image: Some(r.source.clone()),
                    group_id: group.clone(),
                    split: r.split,
                });
            }
            m.it2i_queries.push(Record {
                id: r.id.clone(),
                kind: ItemKind::ImageText,
                text: Some(r.instruction.clone()),
                image: Some(r.source.clone()),
                group_id: group.clone(),
                split: r.split,
            });
            m.it2i_corpus.push(Record {
                id: r.target_id(),
                kind: ItemKind::Image,
                text: None,
                image: Some(r.target.clone()),
                group_id: group.clone(),
                split: r.split,
            });
            m.pairs.push(Record {
                id: format!("pair-{}", r.target_id()),
                kind: ItemKind::ImageText,
                text: Some(r.target_caption()),
                image: Some(r.target.clone()),
                group_id: group,
                split: r.split,
            });
            m.it2i_qrels.insert(r.id.clone(), vec![r.target_id()]);
        }
        for (d, split) in &self.t2it {
            let qid = d.doc_id.replacen("-d", "-q", 1);
            let group = Some(d.group_id.clone());
            m.t2it_queries.push(Record {
                id: qid.clone(),
                kind: ItemKind::Text,
                text: Some(d.query.clone()),
                image: None,
                group_id: group.clone(),
                split: *split,
            });
            m.t2it_corpus.push(Record {
                id: d.doc_id.clone(),
                kind: ItemKind::ImageText,
                text: Some(d.doc_text.clone()),
                image: Some(d.doc_image.clone()),
                group_id: group.clone(),
                split: *split,
            });
            m.pairs.push(Record {
                id: format!("pair-{}", d.doc_id),
                kind: ItemKind::ImageText,
                text: Some(d.doc_image.caption()),
                image: Some(d.doc_image.clone()),
                group_id: group,
                split: *split,
            });
            m.t2it_qrels.insert(qid, vec![d.doc_id.clone()]);
        }
        m
    }
}

/// Outcome of the caption-image agreement filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub kept: Vec<It2iRecord>,
    pub threshold: f64,
    /// Records at or above the threshold, before small groups are dropped.
    pub passed: usize,
    pub rejected: usize,
    pub dropped_groups: usize,
}

impl FilterReport {
    pub fn rejection_rate(&self) -> f64 {
        let total = self.kept.len() + self.rejected;
        if total == 0 {
            0.0
        } else {
            self.rejected as f64 / total as f64
        }
    }
}

/// `cosine(encode_text(target caption), encode_image(target image))` per record.
pub fn target_similarities(records: &[It2iRecord], model: &Model<f32>) -> Result<Vec<f64>> {
    records
        .par_iter()
        .map(|r| {
            let tokens = model.tokenize(&r.target_caption())?;
            let t = model.encode_text(&tokens)?;
            let i = model.encode_image(&r.target.render(model.config.image_size)?)?;
            Ok(t.cosine(&i))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Item { .. } => e,
            other => Error::Item { id: "filter".into(), source: Box::new(other) },
        })
}

/// Keeps records whose similarity reaches `threshold`, then drops groups
/// left with fewer than two members. Input order is preserved.
pub fn filter_by_similarity(records: &[It2iRecord], sims: &[f64], threshold: f64) -> Result<FilterReport> {
    if sims.len() != records.len() {
        return Err(Error::shape(format!("{} similarities", records.len()), sims.len().to_string()));
    }
    let pass: Vec<bool> = sims.iter().map(|&s| s >= threshold).collect();
    let mut members: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for (r, &p) in records.iter().zip(&pass) {
        if p {
            *members.entry(r.group_id.as_str()).or_default() += 1;
        }
    }
    let groups_before: HashSet<&str> = records.iter().map(|r| r.group_id.as_str()).collect();
    let kept: Vec<It2iRecord> = records
        .iter()
        .zip(&pass)
        .filter(|(r, &p)| p && members.get(r.group_id.as_str()).copied().unwrap_or(0) >= 2)
        .map(|(r, _)| r.clone())
        .collect();
    let groups_after: HashSet<&str> = kept.iter().map(|r| r.group_id.as_str()).collect();
    Ok(FilterReport {
        threshold,
        passed: pass.iter().filter(|&&p| p).count(),
        rejected: records.len() - kept.len(),
        dropped_groups: groups_before.len() - groups_after.len(),
        kept,
    })
}

pub fn similarity_filter(records: &[It2iRecord], model: &Model<f32>, threshold: f64) -> Result<FilterReport> {
    let sims = target_similarities(records, model)?;
    filter_by_similarity(records, &sims, threshold)
}

/// Similarity below which the lowest `fraction` of values fall.
pub fn drop_fraction_threshold(sims: &[f64], fraction: f64) -> f64 {
    if sims.is_empty() || fraction <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let mut sorted = sims.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((fraction * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[k]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig { it2i_groups: 60, t2it_records: 80, ..DataConfig::default() }
    }

    #[test]
    fn default_sizes_and_whole_group_splits() {
        let ds = generate_dataset(&small(), 42).unwrap();
        assert_eq!(ds.it2i.len(), 180);
        assert_eq!(ds.t2it.len(), 80);
        let mut split_of = std::collections::HashMap::new();
        for r in &ds.it2i {
            assert_eq!(*split_of.entry(r.group_id.clone()).or_insert(r.split), r.split);
        }
        // 15 families of 4 groups; one family is dev
        let dev = split_of.values().filter(|s| **s == Split::Dev).count();
        assert_eq!(dev, 4);
    }

    #[test]
    fn every_composed_retrieval_image_is_unique() {
        let ds = generate_dataset(&DataConfig { it2i_groups: 400, t2it_records: 1, ..DataConfig::default() }, 9).unwrap();
        let mut images: HashSet<String> = ds.it2i.iter().map(|r| r.target.to_string()).collect();
        assert_eq!(images.len(), ds.it2i.len());
        let sources: HashSet<String> = ds.it2i.iter().map(|r| r.source.to_string()).collect();
        assert_eq!(sources.len(), 400);
        images.extend(sources);
        assert_eq!(images.len(), ds.it2i.len() + 400);
    }

    #[test]
    fn family_sources_differ_from_the_base_by_one_edit() {
        let ds = generate_dataset(&DataConfig { it2i_groups: 8, t2it_records: 1, ..DataConfig::default() }, 2).unwrap();
        let src = |g: usize| ds.it2i[g * 3].source.clone();
        for f in 0..2 {
            let base = src(4 * f);
            for j in 1..4 {
                let v = src(4 * f + j);
                let diff = base.objects().len().abs_diff(v.objects().len())
                    + base.objects().iter().filter(|o| !v.objects().contains(o)).count();
                assert!((1..=2).contains(&diff), "{base} vs {v}");
                assert_eq!(base.background(), v.background());
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate_dataset(&small(), 7).unwrap(), generate_dataset(&small(), 7).unwrap());
        assert_ne!(generate_dataset(&small(), 7).unwrap(), generate_dataset(&small(), 8).unwrap());
    }

    #[test]
    fn thousand_groups_have_no_repeated_source_instruction() {
        let cfg = DataConfig { it2i_groups: 1000, t2it_records: 1, ..DataConfig::default() };
        let ds = generate_dataset(&cfg, 3).unwrap();
        let pairs: HashSet<(String, &str)> = ds.it2i.iter().map(|r| (r.source.to_string(), r.instruction.as_str())).collect();
        assert_eq!(pairs.len(), ds.it2i.len());
    }

    #[test]
    fn palette_restricts_colours() {
        let cfg = DataConfig { palette: vec![Color::Red, Color::Blue], it2i_groups: 30, t2it_records: 6, t2it_group_size: 6, ..DataConfig::default() };
        let ds = generate_dataset(&cfg, 1).unwrap();
        let ok = |s: &SceneSpec| s.objects().iter().all(|o| matches!(o.color, Color::Red | Color::Blue));
        assert!(ds.it2i.iter().all(|r| ok(&r.source) && ok(&r.target)));
        assert!(ds.t2it.iter().all(|(d, _)| ok(&d.doc_image)));
    }

    #[test]
    fn manifests_are_consistent() {
        let ds = generate_dataset(&small(), 5).unwrap();
        let m = ds.manifests();
        assert_eq!(m.it2i_queries.len(), 180);
        assert_eq!(m.it2i_corpus.len(), 180 + 60);
        assert_eq!(m.pairs.len(), 180 + 60 + 80);
        let corpus: HashSet<&str> = m.it2i_corpus.iter().map(|r| r.id.as_str()).collect();
        assert!(m.it2i_qrels.values().flatten().all(|c| corpus.contains(c.as_str())));
        let docs: HashSet<&str> = m.t2it_corpus.iter().map(|r| r.id.as_str()).collect();
        assert!(m.t2it_qrels.values().flatten().all(|c| docs.contains(c.as_str())));
    }

    fn records(n_groups: usize) -> Vec<It2iRecord> {
        let cfg = DataConfig { it2i_groups: n_groups, t2it_records: 1, ..DataConfig::default() };
        generate_dataset(&cfg, 11).unwrap().it2i
    }

    #[test]
    fn filter_bounds_and_group_rule() {
        let recs = records(20);
        let sims: Vec<f64> = (0..recs.len()).map(|i| ((i * 37) % 100) as f64 / 50.0 - 1.0).collect();
        assert_eq!(filter_by_similarity(&recs, &sims, -1.0).unwrap().kept.len(), recs.len());
        assert!(filter_by_similarity(&recs, &sims, 1.0 + 1e-9).unwrap().kept.is_empty());
        let mid = filter_by_similarity(&recs, &sims, 0.0).unwrap();
        let mut count = std::collections::HashMap::new();
        for r in &mid.kept {
            *count.entry(&r.group_id).or_insert(0) += 1;
        }
        assert!(count.values().all(|&c| c >= 2));
        assert_eq!(mid.kept.len() + mid.rejected, recs.len());
    }

    #[test]
    fn drop_fraction_threshold_cuts_the_bottom() {
        let sims: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let t = drop_fraction_threshold(&sims, 0.1);
        assert_eq!(sims.iter().filter(|&&s| s >= t).count(), 90);
    }
}
