//! The commands behind the CLI: data generation, staged training,
//! evaluation and the ablation sweep. Every output is a pure function of
//! the config and seed.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vista_core::checkpoint::{file_digest, Checkpoint};
use vista_core::forge::manifest::Split;
use vista_core::forge::{drop_fraction_threshold, filter_by_similarity, generate_dataset, target_similarities};
use vista_core::retrieval::{evaluate_task, EvalReport, FusionMethod, ModelEncoder, RunInfo};
use vista_core::train::{Stage, TaskTag, Trainer};
use vista_core::{Error, Model, TokenOrder};

use crate::config::RunConfig;
use crate::data::{build_vocab, eval_tasks, read_manifests, train_data, write_manifests, IT2I_TASK, T2IT_TASK};
use crate::error::{CliError, CliResult};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const REPORT: &str = "report.json";
pub const DATA_SUMMARY: &str = "data_summary.json";

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub threshold: f64,
    pub kept: usize,
    pub rejected: usize,
    pub rejection_rate: f64,
    pub dropped_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub seed: u64,
    pub it2i_records: usize,
    pub t2it_records: usize,
    pub caption_pairs: usize,
    pub it2i_by_split: [usize; 3],
    pub t2it_by_split: [usize; 3],
    pub filter: Option<FilterSummary>,
}

impl fmt::Display for DataSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.it2i_by_split;
        writeln!(f, "it2i records: {} (train {a}, dev {b}, test {c})", self.it2i_records)?;
        let [a, b, c] = self.t2it_by_split;
        writeln!(f, "t2it records: {} (train {a}, dev {b}, test {c})", self.t2it_records)?;
        writeln!(f, "caption pairs: {}", self.caption_pairs)?;
        match &self.filter {
            Some(s) => write!(
                f,
                "filter rejection rate: {:.4} ({} of {} training edits dropped, threshold {:.6})",
                s.rejection_rate,
                s.rejected,
                s.kept + s.rejected,
                s.threshold
            ),
            None => write!(f, "filter rejection rate: 0.0000 (no filter model given)"),
        }
    }
}

fn split_counts<'a>(splits: impl Iterator<Item = &'a Split>) -> [usize; 3] {
    let mut c = [0; 3];
    for s in splits {
        c[*s as usize] += 1;
    }
    c
}

/// Generates both datasets into `out`. With a stage-1 checkpoint, training
/// edits whose target caption and image disagree most are dropped.
pub fn gen_data(cfg: &RunConfig, out: &Path, filter_with: Option<&Path>) -> CliResult<DataSummary> {
    let mut ds = generate_dataset(&cfg.data, cfg.seed)?;
    let filter = match filter_with {
        None => None,
        Some(path) => {
            let model = Checkpoint::load(path)?.model;
            let train: Vec<_> = ds.it2i.iter().filter(|r| r.split == Split::Train).cloned().collect();
            let sims = target_similarities(&train, &model)?;
            let threshold = drop_fraction_threshold(&sims, cfg.data.filter_drop_fraction);
            let report = filter_by_similarity(&train, &sims, threshold)?;
            let kept: HashSet<&str> = report.kept.iter().map(|r| r.id.as_str()).collect();
            ds.it2i.retain(|r| r.split != Split::Train || kept.contains(r.id.as_str()));
            Some(FilterSummary {
                threshold,
                kept: report.kept.len(),
                rejected: report.rejected,
                rejection_rate: report.rejection_rate(),
                dropped_groups: report.dropped_groups,
            })
        }
    };
    let m = ds.manifests();
    create_dir(out)?;
    write_manifests(out, &m)?;
    let summary = DataSummary {
        seed: cfg.seed,
        it2i_records: ds.it2i.len(),
        t2it_records: ds.t2it.len(),
        caption_pairs: m.pairs.len(),
        it2i_by_split: split_counts(ds.it2i.iter().map(|r| &r.split)),
        t2it_by_split: split_counts(ds.t2it.iter().map(|(_, s)| s)),
        filter,
    };
    write_file(&out.join(DATA_SUMMARY), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    cfg.write_resolved(out)?;
    Ok(summary)
}

pub fn checkpoint_name(step: usize) -> String {
    format!("checkpoint-{step:06}.ckpt")
}

/// Where a stage starts: fresh, from earlier stages, or mid-way through
/// itself.
fn start_trainer(cfg: &RunConfig, stage: Stage, data_dir: &Path, init: Option<&Path>) -> CliResult<(Trainer<f32>, Vec<Stage>)> {
    let tcfg = cfg.stage(stage);
    let Some(path) = init else {
        if stage != Stage::Stage1 {
            return Err(CliError::Usage(format!("stage {stage} needs a --checkpoint from an earlier stage")));
        }
        let m = read_manifests(data_dir)?;
        let vocab = build_vocab(&m, cfg.model.vocab_size)?;
        let model = Model::init(cfg.model_config(), vocab)?;
        return Ok((Trainer::new(model, tcfg)?, Vec::new()));
    };
    let ck = Checkpoint::load(path)?;
    let completed = ck.completed_stages.clone();
    if let Some(t) = &ck.training {
        if t.config.stage == stage && t.step < t.config.total_steps {
            if t.config != tcfg {
                return Err(CliError::Config(format!(
                    "{} was written with a different [{}] config; resume with the original one",
                    path.display(),
                    stage.as_str()
                )));
            }
            return Ok((ck.resume_trainer()?, completed));
        }
    }
    let needs = match stage {
        Stage::Stage1 => None,
        Stage::Stage2 | Stage::Finetune | Stage::PseudoMap => Some(Stage::Stage1),
    };
    if let Some(req) = needs {
        if !ck.has_completed(req) {
            return Err(CliError::Usage(format!("{} has not completed {req}; train {req} first", path.display())));
        }
    }
    let mut model = ck.model;
    model.config.token_order = cfg.model.token_order;
    Ok((Trainer::new(model, tcfg)?, completed))
}

/// Trains one stage into `out`, writing a checkpoint every `every` steps
/// (when given) and `final.ckpt` at the end. Step lines go to `log` and
/// `train.log`.
pub fn train_stage(
    cfg: &RunConfig,
    stage: Stage,
    data_dir: &Path,
    init: Option<&Path>,
    out: &Path,
    every: Option<usize>,
    log: &mut dyn Write,
) -> CliResult<PathBuf> {
    let (mut trainer, completed) = start_trainer(cfg, stage, data_dir, init)?;
    let data = train_data(&read_manifests(data_dir)?, &trainer.model)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let log_path = out.join(TRAIN_LOG);
    let mut file_log = std::fs::OpenOptions::new()
        .create(true)
        .append(trainer.step > 0)
        .write(true)
        .truncate(trainer.step == 0)
        .open(&log_path)
        .map_err(|e| CliError::Io(log_path.clone(), e))?;
    trainer.run(&data, |line, t| {
        let io = |e| Error::io(&log_path, e);
        writeln!(file_log, "{line}").map_err(io)?;
        writeln!(log, "{line}").map_err(io)?;
        if every.is_some_and(|k| t.step % k == 0) || t.done() {
            Checkpoint::from_trainer(t, completed.clone()).save(&out.join(checkpoint_name(t.step)))?;
        }
        Ok(())
    })?;
    let final_path = out.join(FINAL_CHECKPOINT);
    Checkpoint::from_trainer(&trainer, completed).save(&final_path)?;
    Ok(final_path)
}

/// Evaluates both tasks on the configured split and writes `report.json`.
pub fn evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    fusion: FusionMethod,
    order: Option<TokenOrder>,
    data_dir: &Path,
    out: &Path,
) -> CliResult<Vec<EvalReport>> {
    let m = read_manifests(data_dir)?;
    let model = Checkpoint::load(checkpoint)?.model;
    let info = RunInfo { fusion, checkpoint_digest: file_digest(checkpoint)?, seed: cfg.seed };
    let encoder = ModelEncoder { model: &model, fusion, order: order.unwrap_or(model.config.token_order) };
    let reports = eval_tasks(&m, cfg.eval_split)?
        .iter()
        .map(|t| evaluate_task(&encoder, t, &info))
        .collect::<vista_core::Result<Vec<_>>>()?;
    create_dir(out)?;
    write_file(&out.join(REPORT), serde_json::to_string_pretty(&reports).expect("reports serialize") + "\n")?;
    Ok(reports)
}

fn recall_at_5(reports: &[EvalReport], task: &str) -> f64 {
    reports.iter().find(|r| r.task == task).map_or(f64::NAN, |r| r.recall_at_5)
}

/// Composed and document-retrieval Recall@5 of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub it2i: f64,
    pub t2it: f64,
}

impl Scores {
    pub fn from_reports(reports: &[EvalReport]) -> Self {
        Scores { it2i: recall_at_5(reports, IT2I_TASK), t2it: recall_at_5(reports, T2IT_TASK) }
    }

    pub fn average(&self) -> f64 {
        (self.it2i + self.t2it) / 2.0
    }

    fn mean(all: &[Scores]) -> Scores {
        let n = all.len() as f64;
        Scores { it2i: all.iter().map(|s| s.it2i).sum::<f64>() / n, t2it: all.iter().map(|s| s.t2it).sum::<f64>() / n }
    }
}

/// One ablation configuration: which stage-2 tasks and negatives, which
/// token order, and how composed items are fused at evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub name: &'static str,
    pub label: &'static str,
    /// `None` evaluates the stage-1 checkpoint directly.
    pub tasks: Option<&'static [TaskTag]>,
    pub hard_negatives: Option<usize>,
    pub order: TokenOrder,
    /// Evaluate another leg's checkpoint instead of training.
    pub reuse: Option<&'static str>,
    pub fusion: FusionMethod,
}

const BOTH: &[TaskTag] = &[TaskTag::It2i, TaskTag::T2it];

const fn leg(name: &'static str, label: &'static str, tasks: Option<&'static [TaskTag]>) -> Leg {
    Leg { name, label, tasks, hard_negatives: None, order: TokenOrder::VisualFirst, reuse: None, fusion: FusionMethod::Interleaved }
}

pub const TRAINING_LEGS: [Leg; 5] = [
    leg("stage1_only", "stage 1 only", None),
    Leg { hard_negatives: Some(0), ..leg("it2i_no_hn", "stage 1 + it2i, no hard negatives", Some(&[TaskTag::It2i])) },
    leg("it2i", "stage 1 + it2i", Some(&[TaskTag::It2i])),
    leg("t2it", "stage 1 + t2it", Some(&[TaskTag::T2it])),
    leg("dual", "stage 1 + it2i + t2it", Some(BOTH)),
];

pub const SCORE_FUSION_LEG: Leg =
    Leg { reuse: Some("dual"), fusion: FusionMethod::ScoreFusion, ..leg("score_fusion", "score fusion (dual-task weights)", Some(BOTH)) };

pub const TEXT_FIRST_LEG: Leg = Leg { order: TokenOrder::TextFirst, ..leg("dual_text_first", "text first", Some(BOTH)) };

pub fn all_legs() -> Vec<Leg> {
    let mut v = TRAINING_LEGS.to_vec();
    v.push(SCORE_FUSION_LEG);
    v.push(TEXT_FIRST_LEG);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegResult {
    pub name: String,
    pub label: String,
    pub per_seed: Vec<Scores>,
    pub mean: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<LegResult>,
    pub token_order: Vec<LegResult>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&LegResult> {
        self.rows.iter().chain(&self.token_order).find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!("Recall@5 on the {} split, mean over seeds {}.\n\n", "dev", seeds.join(", "));
        let table = |s: &mut String, title: &str, rows: &[LegResult]| {
            s.push_str(&format!("| {title} | it2i R@5 | t2it R@5 | average |\n|---|---|---|---|\n"));
            for r in rows {
                s.push_str(&format!("| {} | {:.4} | {:.4} | {:.4} |\n", r.label, r.mean.it2i, r.mean.t2it, r.mean.average()));
            }
        };
        table(&mut s, "configuration", &self.rows);
        s.push_str("\n### Token order\n\n");
        table(&mut s, "order", &self.token_order);
        s
    }
}

fn run_leg(cfg: &RunConfig, leg: &Leg, seed_dir: &Path, stage1: &Path, data: &Path) -> CliResult<Vec<EvalReport>> {
    let dir = seed_dir.join("legs").join(leg.name);
    let ckpt = match (leg.reuse, leg.tasks) {
        (Some(other), _) => seed_dir.join("legs").join(other).join(FINAL_CHECKPOINT),
        (None, None) => stage1.to_path_buf(),
        (None, Some(tasks)) => {
            let mut c = cfg.clone();
            c.stage2.tasks = tasks.to_vec();
            if let Some(hn) = leg.hard_negatives {
                c.stage2.hard_negatives_per_query = hn;
            }
            c.model.token_order = leg.order;
            train_stage(&c, Stage::Stage2, data, Some(stage1), &dir, None, &mut std::io::sink())?
        }
    };
    evaluate(cfg, &ckpt, leg.fusion, Some(leg.order), data, &dir)
}

/// Runs every leg for every seed under `out`, writing `ablation.md` and
/// `ablation.json`. A failing leg aborts the sweep; finished legs keep
/// their outputs on disk.
pub fn ablate(cfg: &RunConfig, seeds: &[u64], out: &Path, progress: &mut dyn Write) -> CliResult<AblationTable> {
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let legs = all_legs();
    let mut scores: Vec<Vec<Scores>> = vec![Vec::new(); legs.len()];
    let say = |p: &mut dyn Write, msg: String| writeln!(p, "{msg}").map_err(|e| CliError::Io(out.to_path_buf(), e));
    for &seed in seeds {
        let c = cfg.with_seed(seed);
        let seed_dir = out.join(format!("seed-{seed}"));
        let raw = seed_dir.join("data");
        gen_data(&c, &raw, None)?;
        say(progress, format!("seed {seed}: data generated"))?;
        let stage1 = train_stage(&c, Stage::Stage1, &raw, None, &seed_dir.join("stage1"), None, &mut std::io::sink())?;
        say(progress, format!("seed {seed}: stage 1 trained"))?;
        let filtered = seed_dir.join("data_filtered");
        let summary = gen_data(&c, &filtered, Some(&stage1))?;
        say(progress, format!("seed {seed}: {}", summary.to_string().lines().last().unwrap_or_default()))?;
        for (i, leg) in legs.iter().enumerate() {
            let reports = run_leg(&c, leg, &seed_dir, &stage1, &filtered)?;
            let s = Scores::from_reports(&reports);
            say(progress, format!("seed {seed}: {} it2i={:.4} t2it={:.4}", leg.name, s.it2i, s.t2it))?;
            scores[i].push(s);
        }
    }
    let results: Vec<LegResult> = legs
        .iter()
        .zip(scores)
        .map(|(l, per_seed)| LegResult { name: l.name.into(), label: l.label.into(), mean: Scores::mean(&per_seed), per_seed })
        .collect();
    let dual = results.iter().find(|r| r.name == "dual").cloned().expect("dual leg");
    let (mut rows, mut token_order) = (Vec::new(), Vec::new());
    for r in results {
        if r.name == TEXT_FIRST_LEG.name {
            token_order.push(r);
        } else {
            rows.push(r);
        }
    }
    token_order.insert(0, LegResult { label: "visual first".into(), ..dual });
    let table = AblationTable { seeds: seeds.to_vec(), rows, token_order };
    write_file(&out.join("ablation.md"), table.to_markdown())?;
    write_file(&out.join("ablation.json"), serde_json::to_string_pretty(&table).expect("table serializes") + "\n")?;
    Ok(table)
}
