//! Exact cosine search over a fixed corpus and the Recall@K / MRR@K
//! evaluation harness.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TokenOrder;
use crate::error::{Error, Result};
use crate::forge::manifest::{ItemKind, Qrels, Record, Split};
use crate::fusion::{pseudo_token_encode, score_fusion_encode};
use crate::image::ImageGrid;
use crate::model::{Embedding, Model};

/// How an image-text item becomes one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    #[default]
    Interleaved,
    ScoreFusion,
    PseudoToken,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 3] = [FusionMethod::Interleaved, FusionMethod::ScoreFusion, FusionMethod::PseudoToken];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::Interleaved => "interleaved",
            FusionMethod::ScoreFusion => "score_fusion",
            FusionMethod::PseudoToken => "pseudo_token",
        }
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion method `{s}` (expected interleaved, score_fusion or pseudo_token)")))
    }
}

impl std::fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Anything that maps a manifest record to a unit embedding.
pub trait ItemEncoder: Sync {
    fn encode(&self, record: &Record) -> Result<Embedding>;
}

/// Encodes records with a trained model.
pub struct ModelEncoder<'a> {
    pub model: &'a Model<f32>,
    pub fusion: FusionMethod,
    pub order: TokenOrder,
}

impl<'a> ModelEncoder<'a> {
    pub fn new(model: &'a Model<f32>, fusion: FusionMethod) -> Self {
        ModelEncoder { model, fusion, order: model.config.token_order }
    }

    fn image(&self, r: &Record) -> Result<ImageGrid> {
        let scene = r.image.as_ref().ok_or_else(|| Error::InvalidArgument("record has no image".into()))?;
        scene.render(self.model.config.image_size)
    }

    fn text(&self, r: &Record) -> Result<crate::tokenizer::TokenSequence> {
        let text = r.text.as_deref().ok_or_else(|| Error::InvalidArgument("record has no text".into()))?;
        self.model.tokenize(text)
    }
}

impl ItemEncoder for ModelEncoder<'_> {
    fn encode(&self, r: &Record) -> Result<Embedding> {
        let m = self.model;
        match r.kind {
            ItemKind::Text => m.encode_text(&self.text(r)?),
            ItemKind::Image => m.encode_image(&self.image(r)?),
            ItemKind::ImageText => {
                let (img, txt) = (self.image(r)?, self.text(r)?);
                match self.fusion {
                    FusionMethod::Interleaved => m.encode_interleaved(&img, &txt, self.order),
                    FusionMethod::ScoreFusion => score_fusion_encode(m, &txt, &img, false),
                    FusionMethod::PseudoToken => pseudo_token_encode(m, &txt, &img),
                }
            }
        }
    }
}

/// Encodes every record in parallel; the output follows the input order and
/// any failure names the offending item.
pub fn encode_corpus<E: ItemEncoder + ?Sized>(encoder: &E, records: &[Record]) -> Result<Vec<Embedding>> {
    records
        .par_iter()
        .map(|r| encoder.encode(r).map_err(|e| Error::Item { id: r.id.clone(), source: Box::new(e) }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Row-major matrix of unit embeddings keyed by candidate id.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    dim: usize,
    matrix: Vec<f32>,
}

impl RetrievalIndex {
    pub fn build(ids: Vec<String>, embeddings: &[Embedding]) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::shape(format!("{} embeddings", ids.len()), embeddings.len().to_string()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate candidate id {dup}")));
        }
        let dim = embeddings.first().map_or(0, Embedding::dim);
        let mut matrix = Vec::with_capacity(dim * ids.len());
        for (id, e) in ids.iter().zip(embeddings) {
            if e.dim() != dim {
                return Err(Error::shape(dim.to_string(), e.dim().to_string()));
            }
            if !e.norm().is_finite() || (e.norm() - 1.0).abs() > Embedding::NORM_TOL {
                return Err(Error::InvalidArgument(format!("embedding of {id} has norm {}", e.norm())));
            }
            matrix.extend_from_slice(e.as_slice());
        }
        Ok(RetrievalIndex { ids, dim, matrix })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Top `k` candidates by cosine, best first; equal scores go to the
    /// smaller id. `k` past the corpus size returns the full ranking.
    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::EmptyInput);
        }
        if query.dim() != self.dim {
            return Err(Error::shape(self.dim.to_string(), query.dim().to_string()));
        }
        let q = query.as_slice();
        let mut scored: Vec<(f64, usize)> = self
            .matrix
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, row)| (row.iter().zip(q).map(|(&a, &b)| a as f64 * b as f64).sum(), i))
            .collect();
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query embedding".into()));
        }
        // partial_cmp, not total_cmp: a score of -0.0 ties with 0.0
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored.into_iter().map(|(s, i)| Hit { id: self.ids[i].clone(), score: s }).collect())
    }
}

/// query id → ranked candidate ids, best first.
pub type Run = BTreeMap<String, Vec<String>>;

fn first_relevant(ranked: &[String], relevant: &[String]) -> Option<usize> {
    ranked.iter().position(|c| relevant.contains(c)).map(|p| p + 1)
}

fn per_query<F: Fn(Option<usize>) -> f64>(run: &Run, qrels: &Qrels, f: F) -> Result<f64> {
    if run.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for (q, ranked) in run {
        let rel = qrels.get(q).ok_or_else(|| Error::InvalidArgument(format!("query {q} has no relevance judgments")))?;
        total += f(first_relevant(ranked, rel));
    }
    Ok(total / run.len() as f64)
}

/// Fraction of queries with a relevant candidate in the top `k`.
pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    per_query(run, qrels, |r| if r.is_some_and(|r| r <= k) { 1.0 } else { 0.0 })
}

/// Mean reciprocal rank of the first relevant candidate, counting zero past `k`.
pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    per_query(run, qrels, |r| match r {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    })
}

/// One retrieval task: queries, candidates and judgments.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub queries: Vec<Record>,
    pub corpus: Vec<Record>,
    pub qrels: Qrels,
}

impl TaskSpec {
    /// Keeps only records of `split` when given. Every kept query must have
    /// a relevant candidate in the kept corpus.
    pub fn new(name: &str, queries: Vec<Record>, corpus: Vec<Record>, qrels: Qrels, split: Option<Split>) -> Result<Self> {
        let keep = |r: &Record| split.is_none_or(|s| r.split == s);
        let queries: Vec<Record> = queries.into_iter().filter(keep).collect();
        let corpus: Vec<Record> = corpus.into_iter().filter(keep).collect();
        if queries.is_empty() || corpus.is_empty() {
            return Err(Error::InvalidArgument(format!("task {name} has no queries or no candidates")));
        }
        let ids: HashSet<&str> = corpus.iter().map(|r| r.id.as_str()).collect();
        for q in &queries {
            let rel = qrels.get(&q.id).ok_or_else(|| Error::InvalidArgument(format!("query {} has no relevance judgments", q.id)))?;
            if !rel.iter().any(|c| ids.contains(c.as_str())) {
                return Err(Error::InvalidArgument(format!("no relevant candidate of query {} is in the corpus", q.id)));
            }
        }
        let qrels = queries.iter().map(|q| (q.id.clone(), qrels[&q.id].clone())).collect();
        Ok(TaskSpec { name: name.to_string(), queries, corpus, qrels })
    }
}

/// Metrics for one task. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: String,
    pub fusion: FusionMethod,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub recall_at_20: f64,
    pub mrr_at_10: f64,
    pub queries: usize,
    pub corpus: usize,
    pub checkpoint_digest: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }
}

/// Provenance stamped on a report.
#[derive(Debug, Clone, Default)]
pub struct RunInfo {
    pub fusion: FusionMethod,
    pub checkpoint_digest: String,
    pub seed: u64,
}

pub const REPORT_DEPTH: usize = 20;

/// Ranks the top candidates of every query.
pub fn rank_all<E: ItemEncoder + ?Sized>(encoder: &E, task: &TaskSpec, depth: usize) -> Result<Run> {
    let corpus = encode_corpus(encoder, &task.corpus)?;
    let index = RetrievalIndex::build(task.corpus.iter().map(|r| r.id.clone()).collect(), &corpus)?;
    let queries = encode_corpus(encoder, &task.queries)?;
    task.queries
        .iter()
        .zip(&queries)
        .map(|(q, e)| Ok((q.id.clone(), index.search(e, depth)?.into_iter().map(|h| h.id).collect())))
        .collect()
}

pub fn evaluate_task<E: ItemEncoder + ?Sized>(encoder: &E, task: &TaskSpec, info: &RunInfo) -> Result<EvalReport> {
    let run = rank_all(encoder, task, REPORT_DEPTH)?;
    let q = &task.qrels;
    Ok(EvalReport {
        task: task.name.clone(),
        fusion: info.fusion,
        recall_at_1: recall_at_k(&run, q, 1)?,
        recall_at_5: recall_at_k(&run, q, 5)?,
        recall_at_10: recall_at_k(&run, q, 10)?,
        recall_at_20: recall_at_k(&run, q, 20)?,
        mrr_at_10: mrr_at_k(&run, q, 10)?,
        queries: task.queries.len(),
        corpus: task.corpus.len(),
        checkpoint_digest: info.checkpoint_digest.clone(),
        seed: info.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn unit(v: &[f32]) -> Embedding {
        Embedding::normalize(v).unwrap()
    }

    /// A run where query i finds its relevant candidate at `ranks[i]`.
    fn run_with_ranks(ranks: &[Option<usize>]) -> (Run, Qrels) {
        let mut run = Run::new();
        let mut qrels = Qrels::new();
        for (i, r) in ranks.iter().enumerate() {
            let q = format!("q{i}");
            let mut list: Vec<String> = (1..=20).map(|j| format!("other{j}")).collect();
            if let Some(r) = r {
                list[r - 1] = "hit".into();
            }
            run.insert(q.clone(), list);
            qrels.insert(q, vec!["hit".into()]);
        }
        (run, qrels)
    }

    #[test]
    fn recall_and_mrr_fixtures() {
        let (run, q) = run_with_ranks(&[Some(1), Some(2), Some(3), Some(6), Some(6), Some(11), Some(11)]);
        assert_eq!(recall_at_k(&run, &q, 5).unwrap(), 3.0 / 7.0);
        let (run, q) = run_with_ranks(&[Some(2), None]);
        assert_eq!(mrr_at_k(&run, &q, 10).unwrap(), 0.25);
        let (run, q) = run_with_ranks(&[Some(4)]);
        assert_eq!(recall_at_k(&run, &q, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&run, &q, 3).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&run, &q, 10).unwrap(), 0.25);
    }

    #[test]
    fn missing_judgments_are_an_error() {
        let (run, _) = run_with_ranks(&[Some(1)]);
        assert!(recall_at_k(&run, &Qrels::new(), 5).is_err());
        assert!(mrr_at_k(&Run::new(), &Qrels::new(), 5).is_err());
    }

    #[test]
    fn search_edges() {
        let e = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        let idx = RetrievalIndex::build(ids(&["a", "b", "c"]), &e).unwrap();
        let hits = idx.search(&e[0], 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), ["a", "c", "b"]);
        let empty = RetrievalIndex::build(Vec::new(), &[]).unwrap();
        assert!(matches!(empty.search(&e[0], 1), Err(Error::EmptyInput)));
        assert!(RetrievalIndex::build(ids(&["a", "a"]), &e[..2]).is_err());
        assert!(RetrievalIndex::build(ids(&["a"]), &[Embedding::raw(vec![2.0, 0.0])]).is_err());
    }

    #[test]
    fn ties_break_towards_smaller_ids() {
        let e = vec![unit(&[1.0, 0.0]); 4];
        let idx = RetrievalIndex::build(ids(&["d", "b", "c", "a"]), &e).unwrap();
        let hits = idx.search(&e[0], 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    fn exhaustive(ids: &[String], rows: &[Embedding], q: &Embedding) -> Vec<String> {
        let mut all: Vec<(f64, &String)> =
            ids.iter().zip(rows).map(|(id, r)| (r.as_slice().iter().zip(q.as_slice()).map(|(a, b)| *a as f64 * *b as f64).sum(), id)).collect();
        all.sort_by(|a, b| match b.0.partial_cmp(&a.0).unwrap() {
            Ordering::Equal => a.1.cmp(b.1),
            o => o,
        });
        all.into_iter().map(|(_, id)| id.clone()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn search_matches_exhaustive_ranking(n in 1usize..120, k in 1usize..150, seed in any::<u64>(), coarse in any::<bool>()) {
            let mut r = crate::testutil::rng(seed);
            // coarse vectors collide often, exercising tie-breaks
            let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Embedding {
                let v: Vec<f32> = (0..4).map(|_| if coarse { r.gen_range(-1..=1) as f32 } else { r.gen::<f32>() - 0.5 }).collect();
                Embedding::normalize(&v).unwrap_or_else(|_| unit(&[1.0, 0.0, 0.0, 0.0]))
            };
            let rows: Vec<Embedding> = (0..n).map(|_| draw(&mut r)).collect();
            let names: Vec<String> = (0..n).map(|i| format!("c{:03}", (i * 37) % 1000)).collect();
            let idx = RetrievalIndex::build(names.clone(), &rows).unwrap();
            let q = draw(&mut r);
            let got: Vec<String> = idx.search(&q, k).unwrap().into_iter().map(|h| h.id).collect();
            let want = exhaustive(&names, &rows, &q);
            prop_assert_eq!(&got[..], &want[..k.min(n)]);
        }
    }

    struct Stub<F: Fn(&Record) -> Embedding + Sync>(F);

    impl<F: Fn(&Record) -> Embedding + Sync> ItemEncoder for Stub<F> {
        fn encode(&self, r: &Record) -> Result<Embedding> {
            Ok((self.0)(r))
        }
    }

    fn task(n: usize) -> TaskSpec {
        let rec = |id: String, split| Record { id, kind: ItemKind::Text, text: Some("x".into()), image: None, group_id: None, split };
        let queries = (0..n).map(|i| rec(format!("q{i:02}"), Split::Dev)).chain([rec("qt".into(), Split::Train)]).collect();
        let corpus = (0..n).map(|i| rec(format!("c{i:02}"), Split::Dev)).chain([rec("ct".into(), Split::Train)]).collect();
        let mut qrels = Qrels::new();
        for i in 0..n {
            qrels.insert(format!("q{i:02}"), vec![format!("c{i:02}")]);
        }
        qrels.insert("qt".into(), vec!["ct".into()]);
        TaskSpec::new("toy", queries, corpus, qrels, Some(Split::Dev)).unwrap()
    }

    fn one_hot(r: &Record, n: usize) -> Embedding {
        let i: usize = r.id[1..].parse().unwrap();
        let mut v = vec![0.0f32; n];
        v[i] = 1.0;
        Embedding::raw(v)
    }

    #[test]
    fn perfect_and_constant_encoders() {
        let t = task(40);
        assert_eq!((t.queries.len(), t.corpus.len()), (40, 40));
        let r = evaluate_task(&Stub(|r: &Record| one_hot(r, 40)), &t, &RunInfo::default()).unwrap();
        assert_eq!((r.recall_at_1, r.mrr_at_10), (1.0, 1.0));
        let c = evaluate_task(&Stub(|_: &Record| unit(&[1.0, 0.0])), &t, &RunInfo::default()).unwrap();
        for (got, k) in [(c.recall_at_1, 1), (c.recall_at_5, 5), (c.recall_at_10, 10), (c.recall_at_20, 20)] {
            assert_eq!(got, k as f64 / 40.0);
        }
        assert!(c.mrr_at_10 <= c.recall_at_10);
    }

    #[test]
    fn report_key_order_is_stable() {
        let t = task(5);
        let info = RunInfo { fusion: FusionMethod::ScoreFusion, checkpoint_digest: "ab".into(), seed: 7 };
        let r = evaluate_task(&Stub(|r: &Record| one_hot(r, 5)), &t, &info).unwrap();
        let json = r.to_json();
        let keys: Vec<&str> = json.lines().filter_map(|l| l.trim().strip_prefix('"')?.split('"').next()).collect();
        assert_eq!(
            keys,
            ["task", "fusion", "recall_at_1", "recall_at_5", "recall_at_10", "recall_at_20", "mrr_at_10", "queries", "corpus", "checkpoint_digest", "seed"]
        );
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }

    #[test]
    fn encoder_errors_name_the_item() {
        struct Failing;
        impl ItemEncoder for Failing {
            fn encode(&self, _: &Record) -> Result<Embedding> {
                Err(Error::ZeroVector)
            }
        }
        match evaluate_task(&Failing, &task(3), &RunInfo::default()).unwrap_err() {
            Error::Item { id, .. } => assert_eq!(id, "c00"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_fusion_is_rejected() {
        assert!("mean".parse::<FusionMethod>().is_err());
        for f in FusionMethod::ALL {
            assert_eq!(f.as_str().parse::<FusionMethod>().unwrap(), f);
        }
    }
}
