//! End-to-end stages on top of a [`RunConfig`]; each CLI subcommand maps to
//! one function here.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{require_path, FeatureSource, RunConfig};
use crate::ensemble::{candidate_epochs, field_ensemble, fit_ensemble_weights, Candidate, EnsembleConfig, FieldFit};
use crate::error::{Error, Result};
use crate::features::{FeatureProvider, FileFeatureProvider, SynthSpec, SyntheticFeatureProvider};
use crate::losses::{evaluate_fields, Field, MetricReport};
use crate::probe::load_checkpoint;
use crate::scores::{read_scores, write_scores, ScoreSet};
use crate::submission::write_submission;
use crate::trainer::{
    best_epoch_per_field, build_head_grid, evaluate_checkpoint, parse_metrics_tsv, predict, read_run_meta,
    run_training, select_best_index, DataContext, MetricsRow, RunLayout, RunMeta, SelectionCriterion, TrainPlan,
    TrainSummary,
};
use crate::windows::{
    parse_action_ids, parse_annotations, parse_class_ids, read_id_list, split_membership, AnnotationRecord,
    LabelSpace, SubsetFlags, TailSets, WindowConfig,
};

pub fn feature_provider(cfg: &RunConfig) -> Result<Box<dyn FeatureProvider>> {
    Ok(match cfg.features.source {
        FeatureSource::Files => {
            let dir = require_path(&cfg.features.dir, "features.dir")?;
            Box::new(FileFeatureProvider::new(dir, cfg.features.d_model))
        }
        FeatureSource::Synthetic => Box::new(SyntheticFeatureProvider {
            spec: SynthSpec {
                d_model: cfg.features.d_model,
                n_obs: cfg.features.n_obs,
                n_pred: cfg.features.n_pred,
                seed: cfg.seed,
                separability: cfg.features.separability,
            },
        }),
    })
}

pub fn load_split(path: &Option<std::path::PathBuf>, key: &str) -> Result<Vec<AnnotationRecord>> {
    let records = parse_annotations(require_path(path, key)?, LabelSpace::default())?;
    if records.is_empty() {
        return Err(Error::Empty(format!("{key} has no records")));
    }
    Ok(records)
}

/// Subset membership from the configured participant and tail-class lists.
/// Missing lists leave the corresponding subsets empty.
pub fn subset_flags(cfg: &RunConfig, records: &[AnnotationRecord]) -> Result<Vec<SubsetFlags>> {
    let d = &cfg.data;
    let ids = |p: &Option<std::path::PathBuf>, key: &str| -> Result<Option<(std::path::PathBuf, Vec<String>)>> {
        match p {
            None => Ok(None),
            Some(_) => {
                let path = require_path(p, key)?;
                Ok(Some((path.to_path_buf(), read_id_list(path)?)))
            }
        }
    };
    let unseen: HashSet<String> =
        ids(&d.unseen_participants, "data.unseen_participants")?.map(|(_, v)| v.into_iter().collect()).unwrap_or_default();
    let mut tail = TailSets::default();
    if let Some((p, v)) = ids(&d.tail_verbs, "data.tail_verbs")? {
        tail.verbs = parse_class_ids(&p, &v)?;
    }
    if let Some((p, v)) = ids(&d.tail_nouns, "data.tail_nouns")? {
        tail.nouns = parse_class_ids(&p, &v)?;
    }
    if let Some((p, v)) = ids(&d.tail_actions, "data.tail_actions")? {
        tail.actions = parse_action_ids(&p, &v)?;
    }
    Ok(split_membership(records, &unseen, &tail))
}

/// Clip table at the configured gap: one row per record.
pub fn windows_tsv(records: &[AnnotationRecord], window: &WindowConfig, video_fps: f64) -> Result<String> {
    window.validate()?;
    let mut out = String::from("narration_id\twindow_begin_s\twindow_end_s\tclamped\tframe_indices\n");
    for r in records {
        let w = crate::windows::observation_window(r.start_s, window, None)
            .map_err(|e| e.context(format!("narration {}", r.narration_id)))?;
        let clip = crate::windows::sample_frames(&r.narration_id, &w, window, video_fps)?;
        let idx: Vec<String> = clip.frame_indices.iter().map(u64::to_string).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            clip.narration_id,
            clip.window_begin_s,
            clip.window_end_s,
            u8::from(clip.clamped),
            idx.join(",")
        )
        .unwrap();
    }
    Ok(out)
}

pub fn write_windows(records: &[AnnotationRecord], window: &WindowConfig, video_fps: f64, out: &Path) -> Result<usize> {
    let text = windows_tsv(records, window, video_fps)?;
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(records.len())
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let train = load_split(&cfg.data.train_annotations, "data.train_annotations")?;
    let val = load_split(&cfg.data.val_annotations, "data.val_annotations")?;
    let flags = subset_flags(cfg, &val)?;
    let provider = feature_provider(cfg)?;
    let run_dir = cfg.run_dir()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let plan = TrainPlan {
        run_dir: run_dir.to_path_buf(),
        heads: build_head_grid(&cfg.train.learning_rates, &cfg.train.weight_decays, cfg.train.allow_any_grid)?,
        probe: cfg.probe_config(),
        focal: cfg.focal.clone(),
        window: cfg.window.clone(),
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        seed: cfg.seed,
        video_fps: cfg.data.video_fps,
        parallel_heads: cfg.train.parallel_heads,
        retention: cfg.train.retention,
        criterion: cfg.train.criterion,
    };
    info!(
        "training {} heads for {} epochs on {} instances ({} validation)",
        plan.heads.len(),
        plan.epochs,
        train.len(),
        val.len()
    );
    run_training(&plan, &train, &val, &flags, provider.as_ref())
}

/// Features for re-scoring a finished run; they must match what it was trained on.
fn run_provider(cfg: &RunConfig, meta: &RunMeta) -> Result<Box<dyn FeatureProvider>> {
    let provider = feature_provider(cfg)?;
    if provider.d_model() != meta.probe.d_model {
        return Err(Error::Config(format!(
            "features have width {} but the run was trained at {}",
            provider.d_model(),
            meta.probe.d_model
        )));
    }
    if cfg.features.source == FeatureSource::Synthetic && cfg.seed != meta.seed {
        return Err(Error::Config(format!(
            "synthetic features use seed {} but the run was trained with seed {}",
            cfg.seed, meta.seed
        )));
    }
    Ok(provider)
}

fn data_context<'a>(meta: &'a RunMeta, provider: &'a dyn FeatureProvider) -> DataContext<'a> {
    DataContext { window: &meta.window, provider, vocab: &meta.vocab, video_fps: meta.video_fps }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadEval {
    pub head: usize,
    pub checkpoint: String,
    pub metrics: serde_json::Value,
}

/// Re-evaluates every stored checkpoint of one epoch on the validation split
/// and writes `eval_epoch_<k>.json` into the run directory.
pub fn eval_epoch(cfg: &RunConfig, epoch: usize) -> Result<Vec<(usize, MetricReport)>> {
    let layout = RunLayout::new(cfg.run_dir()?);
    let meta = read_run_meta(&layout)?;
    let val = load_split(&cfg.data.val_annotations, "data.val_annotations")?;
    let flags = subset_flags(cfg, &val)?;
    let provider = run_provider(cfg, &meta)?;
    let data = data_context(&meta, provider.as_ref());
    let mut out = Vec::new();
    let mut json = Vec::new();
    for h in &meta.heads {
        let path = layout.checkpoint(h.head_id, epoch);
        if !path.exists() {
            continue;
        }
        let (params, _) = load_checkpoint(&path)?;
        let c = evaluate_checkpoint(&params, h.head_id, epoch, &val, &flags, &data)?;
        json.push(HeadEval {
            head: h.head_id,
            checkpoint: path.display().to_string(),
            metrics: c.report.to_json(true),
        });
        out.push((h.head_id, c.report));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no checkpoints stored for epoch {epoch}")));
    }
    let path = layout.root.join(format!("eval_epoch_{epoch}.json"));
    let text = serde_json::to_string_pretty(&json).expect("eval report serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// `(epoch, head)` winners in epoch order.
    pub winners: Vec<(usize, usize)>,
    pub best_per_field: BTreeMap<Field, usize>,
}

/// Picks the best head of every epoch, then the best epoch of every field.
pub fn select_from_rows(rows: &[MetricsRow], criterion: SelectionCriterion) -> Result<(Selection, Vec<(usize, MetricReport)>)> {
    let mut by_epoch: BTreeMap<usize, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_epoch.entry(r.epoch).or_default().push(r);
    }
    let mut winners = Vec::new();
    let mut reports = Vec::new();
    for (epoch, rs) in by_epoch {
        let entries: Vec<(usize, &MetricReport)> = rs.iter().map(|r| (r.head, &r.report)).collect();
        let w = rs[select_best_index(&entries, criterion)?];
        winners.push((epoch, w.head));
        reports.push((epoch, w.report.clone()));
    }
    let best_per_field = best_epoch_per_field(&reports)?;
    Ok((Selection { winners, best_per_field }, reports))
}

pub fn read_metrics(layout: &RunLayout) -> Result<Vec<MetricsRow>> {
    let path = layout.metrics();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_metrics_tsv(&text, &path)
}

/// Selection over `<run>/metrics.tsv`, written to `<run>/selection.json`.
pub fn select(run_dir: &Path, criterion: SelectionCriterion) -> Result<Selection> {
    let layout = RunLayout::new(run_dir);
    let (sel, _) = select_from_rows(&read_metrics(&layout)?, criterion)?;
    let path = run_dir.join("selection.json");
    let text = serde_json::to_string_pretty(&sel).expect("selection serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(sel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    /// Candidate `i` is the winning head of epoch `candidate_epochs[i]`.
    pub candidate_epochs: Vec<usize>,
    pub config: EnsembleConfig,
    pub fits: Vec<FieldFit>,
}

fn winner_of(meta: &RunMeta, epoch: usize) -> Result<usize> {
    meta.winners
        .iter()
        .find(|(e, _)| *e == epoch)
        .map(|(_, h)| *h)
        .ok_or_else(|| Error::Config(format!("epoch {epoch} has no recorded winner")))
}

/// Fits per-field weights over the default candidate epochs on the
/// validation split; writes `ensemble.json` and the blended validation scores.
pub fn ensemble(cfg: &RunConfig, run_dir: &Path) -> Result<EnsembleManifest> {
    let layout = RunLayout::new(run_dir);
    let meta = read_run_meta(&layout)?;
    let rows = read_metrics(&layout)?;
    let reports: Vec<(usize, MetricReport)> = meta
        .winners
        .iter()
        .map(|&(e, h)| {
            rows.iter()
                .find(|r| r.epoch == e && r.head == h)
                .map(|r| (e, r.report.clone()))
                .ok_or_else(|| Error::Format { path: layout.metrics(), reason: format!("no row for epoch {e} head {h}") })
        })
        .collect::<Result<_>>()?;
    let best = best_epoch_per_field(&reports)?;
    let epochs = candidate_epochs(&best, &reports, cfg.ensemble.top_action_epochs);
    let pool: Vec<Candidate> = epochs
        .iter()
        .map(|&e| Ok(Candidate { label: format!("epoch_{e}"), scores: read_scores(&layout.best_scores(e))? }))
        .collect::<Result<_>>()?;
    let val = load_split(&cfg.data.val_annotations, "data.val_annotations")?;
    let all: Vec<usize> = (0..pool.len()).collect();
    let (config, fits) = fit_ensemble_weights(
        &pool,
        &[all.clone(), all.clone(), all],
        &val,
        cfg.ensemble.grid_steps,
        cfg.ensemble.mode,
    )?;
    let blended = field_ensemble(&pool, &config)?;
    write_scores(&blended, &layout.ensemble_scores())?;
    let flags = subset_flags(cfg, &val)?;
    let report = evaluate_fields(&blended, &val, &flags)?;
    info!(
        "ensemble of epochs {epochs:?}: verb {:?}, noun {:?}, action {:?}",
        report.overall(Field::Verb),
        report.overall(Field::Noun),
        report.overall(Field::Action)
    );
    let manifest = EnsembleManifest { candidate_epochs: epochs, config, fits: fits.to_vec() };
    let path = layout.ensemble_config();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(layout: &RunLayout) -> Result<EnsembleManifest> {
    let path = layout.ensemble_config();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Scores `records` with the ensemble's candidate checkpoints and blends them.
pub fn predict_with_ensemble(cfg: &RunConfig, run_dir: &Path, records: &[AnnotationRecord]) -> Result<Vec<ScoreSet>> {
    let layout = RunLayout::new(run_dir);
    let meta = read_run_meta(&layout)?;
    let manifest = read_manifest(&layout)?;
    let provider = run_provider(cfg, &meta)?;
    let data = data_context(&meta, provider.as_ref());
    let pool: Vec<Candidate> = manifest
        .candidate_epochs
        .iter()
        .map(|&e| {
            let (params, _) = load_checkpoint(&layout.checkpoint(winner_of(&meta, e)?, e))?;
            let scores = records.par_iter().map(|r| predict(&params, r, &data)).collect::<Result<_>>()?;
            Ok(Candidate { label: format!("epoch_{e}"), scores })
        })
        .collect::<Result<_>>()?;
    field_ensemble(&pool, &manifest.config)
}

/// Writes the challenge file from `scores`, or from the run's blended
/// validation scores when none are given.
pub fn submit(cfg: &RunConfig, run_dir: &Path, scores: Option<Vec<ScoreSet>>, out: &Path) -> Result<usize> {
    let sets = match scores {
        Some(s) => s,
        None => read_scores(&RunLayout::new(run_dir).ensemble_scores())?,
    };
    write_submission(&sets, cfg.submission, out)?;
    Ok(sets.len())
}
