//! Epoch-major training of the head grid with on-disk run layout:
//!
//! ```text
//! <run>/run.json                 configs, seed, vocabulary, per-epoch winners
//! <run>/metrics.tsv              one row per (epoch, head)
//! <run>/head_<id>/epoch_<k>.ckpt
//! <run>/epoch_<k>_best.scores    validation scores of the epoch's winning head
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    best_epoch_per_field, evaluate_checkpoint, select_best_index, train_epoch, DataContext, EpochCandidate,
    HeadConfig, SelectionCriterion, TrainState,
};
use crate::error::{Error, Result};
use crate::features::FeatureProvider;
use crate::losses::{Field, FocalConfig, MetricReport};
use crate::probe::{init_params, save_checkpoint, CheckpointMeta, ProbeConfig};
use crate::scores::write_scores;
use crate::seed::{self, stream};
use crate::vocab::LabelVocab;
use crate::windows::{AnnotationRecord, SubsetFlags, WindowConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointRetention {
    /// Only the winning head of each epoch.
    #[default]
    Winners,
    All,
}

#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn head_dir(&self, head: usize) -> PathBuf {
        self.root.join(format!("head_{head}"))
    }

    pub fn checkpoint(&self, head: usize, epoch: usize) -> PathBuf {
        self.head_dir(head).join(format!("epoch_{epoch}.ckpt"))
    }

    pub fn best_scores(&self, epoch: usize) -> PathBuf {
        self.root.join(format!("epoch_{epoch}_best.scores"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.tsv")
    }

    pub fn meta(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn ensemble_config(&self) -> PathBuf {
        self.root.join("ensemble.json")
    }

    pub fn ensemble_scores(&self) -> PathBuf {
        self.root.join("ensemble.scores")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub video_fps: f64,
    pub criterion: SelectionCriterion,
    pub retention: CheckpointRetention,
    pub window: WindowConfig,
    /// Shared by every head apart from its seed.
    pub probe: ProbeConfig,
    pub focal: FocalConfig,
    pub heads: Vec<HeadConfig>,
    pub vocab: LabelVocab,
    /// `(epoch, head_id)` of each epoch's selected head.
    pub winners: Vec<(usize, usize)>,
}

pub fn read_run_meta(layout: &RunLayout) -> Result<RunMeta> {
    let path = layout.meta();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut meta: RunMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("run metadata: {e}")))?;
    meta.vocab.reindex();
    Ok(meta)
}

fn write_run_meta(layout: &RunLayout, meta: &RunMeta) -> Result<()> {
    let path = layout.meta();
    let mut text = serde_json::to_string_pretty(meta).expect("run metadata serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub run_dir: PathBuf,
    pub heads: Vec<HeadConfig>,
    /// Class counts are replaced by the training vocabulary sizes.
    pub probe: ProbeConfig,
    pub focal: FocalConfig,
    pub window: WindowConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub video_fps: f64,
    pub parallel_heads: usize,
    pub retention: CheckpointRetention,
    pub criterion: SelectionCriterion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub head: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub winner: usize,
    pub report: MetricReport,
    /// Mean training loss per head, in head order.
    pub mean_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochSummary>,
    pub best_per_field: BTreeMap<Field, usize>,
}

pub fn metrics_tsv_header() -> String {
    let mut h = String::from("epoch\thead");
    for k in MetricReport::keys() {
        h.push('\t');
        h.push_str(&k);
    }
    h
}

/// Values use the shortest round-trip decimal form; absent metrics are `NA`.
pub fn write_metrics_tsv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = metrics_tsv_header();
    out.push('\n');
    for r in rows {
        write!(out, "{}\t{}", r.epoch, r.head).unwrap();
        for (_, v) in r.report.flat() {
            match v {
                Some(v) => write!(out, "\t{v}").unwrap(),
                None => out.push_str("\tNA"),
            }
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_tsv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::format(path, "empty metrics file"))?;
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "epoch" || cols[1] != "head" {
        return Err(Error::format(path, "header must start with epoch, head"));
    }
    let keys = MetricReport::keys();
    for k in &keys {
        if !cols.contains(&k.as_str()) {
            return Err(Error::format(path, format!("missing column {k}")));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let bad = |reason: String| Error::MalformedRow { path: path.to_path_buf(), row, reason };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(bad(format!("{} fields, header has {}", fields.len(), cols.len())));
        }
        let epoch = fields[0].parse().map_err(|_| bad(format!("bad epoch {:?}", fields[0])))?;
        let head = fields[1].parse().map_err(|_| bad(format!("bad head {:?}", fields[1])))?;
        let mut flat = Vec::with_capacity(keys.len());
        for (c, v) in cols.iter().zip(&fields).skip(2) {
            if !keys.iter().any(|k| k == c) {
                continue;
            }
            let v = if *v == "NA" {
                None
            } else {
                let x: f64 = v.parse().map_err(|_| bad(format!("bad value {v:?} in {c}")))?;
                if !x.is_finite() {
                    return Err(bad(format!("non-finite value in {c}")));
                }
                Some(x)
            };
            flat.push((c.to_string(), v));
        }
        rows.push(MetricsRow { epoch, head, report: MetricReport::from_flat(&flat)? });
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} has no metric rows", path.display())));
    }
    Ok(rows)
}

/// Trains every head for `plan.epochs` epochs. After each epoch all heads are
/// validated, the winner is selected and its scores exported.
pub fn run_training(
    plan: &TrainPlan,
    train: &[AnnotationRecord],
    val: &[AnnotationRecord],
    val_flags: &[SubsetFlags],
    provider: &dyn FeatureProvider,
) -> Result<TrainSummary> {
    if plan.heads.is_empty() {
        return Err(Error::Config("no heads to train".into()));
    }
    if plan.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    plan.window.validate()?;
    plan.focal.validate()?;
    let vocab = LabelVocab::from_records(train)?;
    let mut probe = plan.probe.clone();
    probe.n_verb = vocab.verbs.len();
    probe.n_noun = vocab.nouns.len();
    probe.n_action = vocab.pairs.len();
    if provider.d_model() != probe.d_model {
        return Err(Error::Config(format!(
            "features have d_model {} but the probe expects {}",
            provider.d_model(),
            probe.d_model
        )));
    }
    probe.validate()?;

    let layout = RunLayout::new(&plan.run_dir);
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let data = DataContext { window: &plan.window, provider, vocab: &vocab, video_fps: plan.video_fps };

    let mut states = plan
        .heads
        .iter()
        .map(|h| {
            let mut cfg = probe.clone();
            cfg.seed = seed::derive(plan.seed, &[stream::PROBE_INIT, h.head_id as u64]);
            Ok(TrainState::new(init_params(&cfg)?, seed::derive(plan.seed, &[h.head_id as u64])))
        })
        .collect::<Result<Vec<_>>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallel_heads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut meta = RunMeta {
        seed: plan.seed,
        epochs: plan.epochs,
        batch_size: plan.batch_size,
        video_fps: plan.video_fps,
        criterion: plan.criterion,
        retention: plan.retention,
        window: plan.window.clone(),
        probe: probe.clone(),
        focal: plan.focal.clone(),
        heads: plan.heads.clone(),
        vocab: vocab.clone(),
        winners: Vec::new(),
    };
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut summaries = Vec::with_capacity(plan.epochs);
    for _ in 0..plan.epochs {
        let results: Vec<(f64, EpochCandidate)> = pool.install(|| {
            states
                .par_iter_mut()
                .zip(&plan.heads)
                .map(|(state, head)| {
                    let trace = train_epoch(state, head, train, &data, &plan.focal, plan.batch_size)
                        .map_err(|e| e.context(format!("head {}", head.head_id)))?;
                    let cand = evaluate_checkpoint(&state.params, head.head_id, trace.epoch, val, val_flags, &data)?;
                    Ok((trace.mean_loss, cand))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let epoch = results[0].1.epoch;
        let entries: Vec<(usize, &MetricReport)> = results.iter().map(|(_, c)| (c.head_id, &c.report)).collect();
        let w = select_best_index(&entries, plan.criterion)?;
        let winner = &results[w].1;

        for (i, (state, head)) in states.iter().zip(&plan.heads).enumerate() {
            if plan.retention == CheckpointRetention::All || i == w {
                let dir = layout.head_dir(head.head_id);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let ckpt_meta = CheckpointMeta {
                    head_id: head.head_id,
                    epoch,
                    learning_rate: head.learning_rate,
                    weight_decay: head.weight_decay,
                };
                save_checkpoint(&state.params, &ckpt_meta, &layout.checkpoint(head.head_id, epoch))?;
            }
        }
        write_scores(&winner.scores, &layout.best_scores(epoch))?;
        rows.extend(results.iter().map(|(_, c)| MetricsRow { epoch, head: c.head_id, report: c.report.clone() }));
        write_metrics_tsv(&rows, &layout.metrics())?;
        meta.winners.push((epoch, winner.head_id));
        write_run_meta(&layout, &meta)?;

        info!(
            "epoch {epoch}: head {} wins (verb {:?}, noun {:?}, action {:?})",
            winner.head_id,
            winner.report.overall(Field::Verb),
            winner.report.overall(Field::Noun),
            winner.report.overall(Field::Action)
        );
        summaries.push(EpochSummary {
            epoch,
            winner: winner.head_id,
            report: winner.report.clone(),
            mean_losses: results.iter().map(|(l, _)| *l).collect(),
        });
    }
    let reports: Vec<(usize, MetricReport)> = summaries.iter().map(|s| (s.epoch, s.report.clone())).collect();
    Ok(TrainSummary { best_per_field: best_epoch_per_field(&reports)?, epochs: summaries })
}
