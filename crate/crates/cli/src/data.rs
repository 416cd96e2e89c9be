//! On-disk dataset layout and conversion of manifests into training data
//! and evaluation tasks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use vista_core::forge::manifest::{read_manifest, read_qrels, write_manifest, write_qrels, Qrels, Record, Split};
use vista_core::forge::Manifests;
use vista_core::retrieval::TaskSpec;
use vista_core::train::{CaptionPair, DocGroup, DocRecord, EditExample, EditGroup, TrainData};
use vista_core::{Error, ImageGrid, Model, TokenSequence, Vocab};

use crate::error::CliResult;

pub const PAIRS: &str = "pairs.jsonl";
pub const IT2I_QUERIES: &str = "it2i_queries.jsonl";
pub const IT2I_CORPUS: &str = "it2i_corpus.jsonl";
pub const IT2I_QRELS: &str = "it2i_qrels.tsv";
pub const T2IT_QUERIES: &str = "t2it_queries.jsonl";
pub const T2IT_CORPUS: &str = "t2it_corpus.jsonl";
pub const T2IT_QRELS: &str = "t2it_qrels.tsv";

pub const IT2I_TASK: &str = "it2i";
pub const T2IT_TASK: &str = "t2it";

pub fn write_manifests(dir: &Path, m: &Manifests) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| vista_core::Error::io(dir, e))?;
    write_manifest(&dir.join(PAIRS), &m.pairs)?;
    write_manifest(&dir.join(IT2I_QUERIES), &m.it2i_queries)?;
    write_manifest(&dir.join(IT2I_CORPUS), &m.it2i_corpus)?;
    write_qrels(&dir.join(IT2I_QRELS), &m.it2i_qrels)?;
    write_manifest(&dir.join(T2IT_QUERIES), &m.t2it_queries)?;
    write_manifest(&dir.join(T2IT_CORPUS), &m.t2it_corpus)?;
    write_qrels(&dir.join(T2IT_QRELS), &m.t2it_qrels)?;
    Ok(())
}

pub fn read_manifests(dir: &Path) -> CliResult<Manifests> {
    Ok(Manifests {
        pairs: read_manifest(&dir.join(PAIRS))?,
        it2i_queries: read_manifest(&dir.join(IT2I_QUERIES))?,
        it2i_corpus: read_manifest(&dir.join(IT2I_CORPUS))?,
        it2i_qrels: read_qrels(&dir.join(IT2I_QRELS))?,
        t2it_queries: read_manifest(&dir.join(T2IT_QUERIES))?,
        t2it_corpus: read_manifest(&dir.join(T2IT_CORPUS))?,
        t2it_qrels: read_qrels(&dir.join(T2IT_QRELS))?,
    })
}

fn train_split(records: &[Record]) -> impl Iterator<Item = &Record> {
    records.iter().filter(|r| r.split == Split::Train)
}

/// Vocabulary over every training-split text.
pub fn build_vocab(m: &Manifests, max_size: usize) -> CliResult<Vocab> {
    let texts = [&m.pairs, &m.it2i_queries, &m.t2it_queries, &m.t2it_corpus]
        .into_iter()
        .flat_map(|rs| train_split(rs))
        .filter_map(|r| r.text.as_deref());
    Ok(Vocab::build(texts, max_size)?)
}

fn with_id<T>(r: &Record, f: impl FnOnce() -> vista_core::Result<T>) -> vista_core::Result<T> {
    f().map_err(|e| Error::Item { id: r.id.clone(), source: Box::new(e) })
}

fn image(model: &Model<f32>, r: &Record) -> vista_core::Result<ImageGrid> {
    with_id(r, || {
        r.image.as_ref().ok_or_else(|| Error::InvalidArgument("missing image".into()))?.render(model.config.image_size)
    })
}

fn text(model: &Model<f32>, r: &Record) -> vista_core::Result<TokenSequence> {
    with_id(r, || model.tokenize(r.text.as_deref().ok_or_else(|| Error::InvalidArgument("missing text".into()))?))
}

/// Dense ids for pool deduplication: identical images share one key.
#[derive(Default)]
struct Keys(HashMap<String, u64>);

impl Keys {
    fn of(&mut self, name: String) -> u64 {
        let next = self.0.len() as u64;
        *self.0.entry(name).or_insert(next)
    }
}

fn relevant<'a>(qrels: &Qrels, corpus: &'a HashMap<&str, &Record>, q: &Record) -> vista_core::Result<&'a Record> {
    let id = qrels
        .get(&q.id)
        .and_then(|c| c.first())
        .ok_or_else(|| Error::InvalidArgument(format!("query {} has no relevant candidate", q.id)))?;
    corpus.get(id.as_str()).copied().ok_or_else(|| Error::InvalidArgument(format!("candidate {id} of query {} is missing", q.id)))
}

/// Groups records by `group_id`, in order of first appearance.
fn grouped<'a>(records: impl Iterator<Item = &'a Record>) -> Vec<Vec<&'a Record>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
    for r in records {
        let g = r.group_id.as_deref().unwrap_or(&r.id);
        groups.entry(g).or_insert_with(|| {
            order.push(g);
            Vec::new()
        });
        groups.get_mut(g).expect("just inserted").push(r);
    }
    order.into_iter().map(|g| groups.remove(g).expect("grouped")).collect()
}

/// Training-split pairs, edit groups and document groups, rendered and
/// tokenized for `model`.
pub fn train_data(m: &Manifests, model: &Model<f32>) -> CliResult<TrainData> {
    let pairs: Vec<&Record> = train_split(&m.pairs).collect();
    let pairs = pairs
        .par_iter()
        .map(|r| Ok(CaptionPair { image: image(model, r)?, caption: text(model, r)? }))
        .collect::<vista_core::Result<Vec<_>>>()?;

    let mut keys = Keys::default();
    let scene_key = |keys: &mut Keys, r: &Record| keys.of(format!("image:{}", r.image.as_ref().map(|s| s.to_string()).unwrap_or_default()));

    let it2i_corpus: HashMap<&str, &Record> = m.it2i_corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut edit_groups = Vec::new();
    for group in grouped(train_split(&m.it2i_queries)) {
        let first = group[0];
        let mut edits = Vec::with_capacity(group.len());
        for q in &group {
            let target = relevant(&m.it2i_qrels, &it2i_corpus, q)?;
            edits.push(EditExample { key: scene_key(&mut keys, target), instruction: text(model, q)?, target: image(model, target)? });
        }
        edit_groups.push(EditGroup { source_key: scene_key(&mut keys, first), source: image(model, first)?, edits });
    }

    let t2it_corpus: HashMap<&str, &Record> = m.t2it_corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut doc_groups = Vec::new();
    for group in grouped(train_split(&m.t2it_queries)) {
        let mut records = Vec::with_capacity(group.len());
        for q in &group {
            let d = relevant(&m.t2it_qrels, &t2it_corpus, q)?;
            records.push(DocRecord {
                key: keys.of(format!("doc:{}", d.id)),
                query: text(model, q)?,
                image: image(model, d)?,
                text: text(model, d)?,
            });
        }
        doc_groups.push(DocGroup { records });
    }
    Ok(TrainData { pairs, edit_groups, doc_groups })
}

/// Both retrieval tasks restricted to `split`.
pub fn eval_tasks(m: &Manifests, split: Split) -> CliResult<Vec<TaskSpec>> {
    Ok(vec![
        TaskSpec::new(IT2I_TASK, m.it2i_queries.clone(), m.it2i_corpus.clone(), m.it2i_qrels.clone(), Some(split))?,
        TaskSpec::new(T2IT_TASK, m.t2it_queries.clone(), m.t2it_corpus.clone(), m.t2it_qrels.clone(), Some(split))?,
    ])
}
