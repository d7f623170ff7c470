//! Head grid, optimizer, epoch loop, validation and per-epoch selection.

mod run;

use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{expand_scores, top100_action_pairs};
use crate::error::{Error, Result};
use crate::features::{assemble_tokens, FeatureProvider};
use crate::losses::{evaluate_fields, total_loss, Field, FocalConfig, MetricReport};
use crate::probe::{probe_backward, probe_forward, LogitTriple, ProbeGradients, ProbeParameters};
use crate::scores::ScoreSet;
use crate::seed::{self, stream};
use crate::tensor::Matrix;
use crate::vocab::LabelVocab;
use crate::windows::{
    observation_window, perturb_anticipation, sample_frames, AnnotationRecord, ClipSpec, SubsetFlags, WindowConfig,
    N_NOUN_CLASSES, N_VERB_CLASSES,
};

pub use run::{
    metrics_tsv_header, parse_metrics_tsv, read_run_meta, run_training, write_metrics_tsv, CheckpointRetention,
    EpochSummary, MetricsRow, RunLayout, RunMeta, TrainPlan, TrainSummary,
};

pub const GRID_SIZE: usize = 20;
pub const DEFAULT_LEARNING_RATES: [f64; 5] = [3e-3, 1e-3, 3e-4, 1e-4, 3e-5];
pub const DEFAULT_WEIGHT_DECAYS: [f64; 4] = [0.0, 1e-4, 1e-2, 1e-1];

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub head_id: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// Cartesian product of learning rates and weight decays, learning-rate major.
/// Anything but a 20-head grid needs `allow_any_size`.
pub fn build_head_grid(lrs: &[f64], wds: &[f64], allow_any_size: bool) -> Result<Vec<HeadConfig>> {
    if lrs.is_empty() || wds.is_empty() {
        return Err(Error::Config("head grid needs at least one learning rate and one weight decay".into()));
    }
    let n = lrs.len() * wds.len();
    if n != GRID_SIZE && !allow_any_size {
        return Err(Error::Config(format!(
            "{} learning rates x {} weight decays = {n} heads, expected {GRID_SIZE}",
            lrs.len(),
            wds.len()
        )));
    }
    if let Some(lr) = lrs.iter().find(|&&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and > 0")));
    }
    if let Some(wd) = wds.iter().find(|&&v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::Config(format!("weight decay {wd} must be finite and >= 0")));
    }
    let mut seen = HashSet::new();
    let mut heads = Vec::with_capacity(n);
    for &lr in lrs {
        for &wd in wds {
            if !seen.insert((lr.to_bits(), wd.to_bits())) {
                return Err(Error::Config(format!("duplicate head (lr {lr}, wd {wd})")));
            }
            heads.push(HeadConfig { head_id: heads.len(), learning_rate: lr, weight_decay: wd });
        }
    }
    Ok(heads)
}

/// Parameters plus optimizer moments for one head.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub params: ProbeParameters,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    /// Base for this head's shuffle and perturbation streams.
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ProbeParameters, seed: u64) -> Self {
        let zeros: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self { epoch: 0, m: zeros.clone(), v: zeros, params, step: 0, seed }
    }
}

thread_local! {
    static EVAL_DEPTH: Cell<usize> = const { Cell::new(0) };
    static STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Optimizer steps taken on the current thread so far.
pub fn optimizer_steps_on_thread() -> u64 {
    STEPS.with(Cell::get)
}

/// Marks the current thread as evaluating until dropped; optimizer steps on
/// a marked thread fail.
pub struct EvalPhase(());

impl EvalPhase {
    pub fn enter() -> Self {
        EVAL_DEPTH.with(|d| d.set(d.get() + 1));
        EvalPhase(())
    }
}

impl Drop for EvalPhase {
    fn drop(&mut self) {
        EVAL_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Adaptive-moment update with bias correction and decoupled weight decay.
pub fn optimizer_step(state: &mut TrainState, grads: &ProbeGradients, head: &HeadConfig) -> Result<()> {
    if EVAL_DEPTH.with(Cell::get) > 0 {
        return Err(Error::Protocol("optimizer step attempted during evaluation".into()));
    }
    if grads.tensors.len() != state.params.len()
        || grads.tensors.iter().zip(state.params.tensors()).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::Shape("gradient shapes do not match the parameters".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("gradients at step {}", state.step + 1)));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - ADAM_BETA1.powf(t);
    let c2 = 1.0 - ADAM_BETA2.powf(t);
    let lr = head.learning_rate;
    let shrink = 1.0 - lr * head.weight_decay;
    let m = &mut state.m;
    let v = &mut state.v;
    for (i, p) in state.params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensors[i].as_slice();
        let (mi, vi) = (m[i].as_mut_slice(), v[i].as_mut_slice());
        for (j, theta) in p.as_mut_slice().iter_mut().enumerate() {
            mi[j] = ADAM_BETA1 * mi[j] + (1.0 - ADAM_BETA1) * g[j];
            vi[j] = ADAM_BETA2 * vi[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = mi[j] / c1;
            let v_hat = vi[j] / c2;
            *theta = *theta * shrink - lr * (m_hat / (v_hat.sqrt() + ADAM_EPS));
        }
    }
    STEPS.with(|s| s.set(s.get() + 1));
    Ok(())
}

/// Everything needed to turn an annotation into probe inputs.
#[derive(Clone, Copy)]
pub struct DataContext<'a> {
    pub window: &'a WindowConfig,
    pub provider: &'a dyn FeatureProvider,
    pub vocab: &'a LabelVocab,
    pub video_fps: f64,
}

impl DataContext<'_> {
    /// Resolves the clip for a record. `anticipation_s` overrides the
    /// configured gap.
    pub fn clip(&self, r: &AnnotationRecord, anticipation_s: Option<f64>) -> Result<ClipSpec> {
        let w = observation_window(r.start_s, self.window, anticipation_s)
            .map_err(|e| e.context(format!("narration {}", r.narration_id)))?;
        sample_frames(&r.narration_id, &w, self.window, self.video_fps)
    }

    pub fn inputs(&self, r: &AnnotationRecord, clip: &ClipSpec) -> Result<(Matrix, Vec<u8>)> {
        let fs = self
            .provider
            .fetch(r, clip)
            .map_err(|e| e.context(format!("features for narration {}", r.narration_id)))?;
        Ok((assemble_tokens(&fs)?, fs.segment_ids()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Mean loss of each mini-batch, in order.
    pub batch_losses: Vec<f64>,
    pub mean_loss: f64,
    pub n_instances: usize,
    /// Instances whose perturbed gap left no observable history and fell
    /// back to the configured gap.
    pub n_gap_fallbacks: usize,
}

/// One shuffled pass over the training records with a step per mini-batch.
pub fn train_epoch(
    state: &mut TrainState,
    head: &HeadConfig,
    records: &[AnnotationRecord],
    data: &DataContext,
    focal: &FocalConfig,
    batch_size: usize,
) -> Result<EpochTrace> {
    if records.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let epoch = state.epoch + 1;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut seed::rng(state.seed, &[stream::SHUFFLE, epoch as u64]));
    let mut perturb_rng = seed::rng(state.seed, &[stream::PERTURB, epoch as u64]);

    let mut batch_losses = Vec::with_capacity(records.len().div_ceil(batch_size));
    let mut total = 0.0;
    let mut fallbacks = 0;
    for batch in order.chunks(batch_size) {
        let mut grads = ProbeGradients::zeros_like(&state.params);
        let mut batch_loss = 0.0;
        for &i in batch {
            let r = &records[i];
            let gap = perturb_anticipation(data.window, &mut perturb_rng);
            let clip = match data.clip(r, Some(gap)) {
                Ok(c) => c,
                Err(e) if is_unsatisfiable(&e) => {
                    fallbacks += 1;
                    data.clip(r, None)?
                }
                Err(e) => return Err(e),
            };
            let (tokens, segments) = data.inputs(r, &clip)?;
            let labels = data.vocab.labels(r)?;
            let (logits, tape) = probe_forward(&tokens, &segments, &state.params)
                .map_err(|e| e.context(format!("narration {}", r.narration_id)))?;
            let (loss, dlogits) = total_loss(&logits, labels, focal)?;
            grads.add_assign(&probe_backward(&tape, &dlogits, &state.params)?);
            batch_loss += loss.total;
        }
        grads.scale(1.0 / batch.len() as f64);
        optimizer_step(state, &grads, head)?;
        total += batch_loss;
        batch_losses.push(batch_loss / batch.len() as f64);
    }
    state.epoch = epoch;
    Ok(EpochTrace {
        epoch,
        batch_losses,
        mean_loss: total / records.len() as f64,
        n_instances: records.len(),
        n_gap_fallbacks: fallbacks,
    })
}

fn is_unsatisfiable(e: &Error) -> bool {
    match e {
        Error::UnsatisfiableWindow { .. } => true,
        Error::Context { source, .. } => is_unsatisfiable(source),
        _ => false,
    }
}

/// Expands vocabulary logits to the official label spaces and exports the
/// top-100 action pairs.
pub fn logits_to_scores(narration_id: &str, logits: &LogitTriple, vocab: &LabelVocab) -> Result<ScoreSet> {
    let verb = expand_scores(&logits.verb, &vocab.verbs, N_VERB_CLASSES)?;
    let noun = expand_scores(&logits.noun, &vocab.nouns, N_NOUN_CLASSES)?;
    let action = top100_action_pairs(&logits.action, &vocab.pairs, &verb, &noun)?;
    Ok(ScoreSet { narration_id: narration_id.to_string(), verb, noun, action })
}

/// Scores for one record at the configured (unperturbed) gap.
pub fn predict(params: &ProbeParameters, r: &AnnotationRecord, data: &DataContext) -> Result<ScoreSet> {
    let clip = data.clip(r, None)?;
    let (tokens, segments) = data.inputs(r, &clip)?;
    let (logits, _) = probe_forward(&tokens, &segments, params)
        .map_err(|e| e.context(format!("narration {}", r.narration_id)))?;
    logits_to_scores(&r.narration_id, &logits, data.vocab)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochCandidate {
    pub epoch: usize,
    pub head_id: usize,
    pub report: MetricReport,
    pub checkpoint: Option<PathBuf>,
    pub scores: Vec<ScoreSet>,
}

/// Scores every validation record at the fixed gap and attaches the metrics.
pub fn evaluate_checkpoint(
    params: &ProbeParameters,
    head_id: usize,
    epoch: usize,
    records: &[AnnotationRecord],
    flags: &[SubsetFlags],
    data: &DataContext,
) -> Result<EpochCandidate> {
    if records.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    let _phase = EvalPhase::enter();
    let scores: Vec<ScoreSet> = records.par_iter().map(|r| predict(params, r, data)).collect::<Result<_>>()?;
    let report = evaluate_fields(&scores, records, flags)?;
    Ok(EpochCandidate { epoch, head_id, report, checkpoint: None, scores })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    /// Overall action MT5R, then overall verb MT5R.
    #[default]
    ActionThenVerb,
    /// Overall MT5R of a single field.
    Field(Field),
}

impl SelectionCriterion {
    fn key(self, r: &MetricReport) -> [f64; 2] {
        let get = |f| r.overall(f).unwrap_or(f64::NEG_INFINITY);
        match self {
            SelectionCriterion::ActionThenVerb => [get(Field::Action), get(Field::Verb)],
            SelectionCriterion::Field(f) => [get(f), f64::NEG_INFINITY],
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "action_then_verb" | "action" => Some(Self::ActionThenVerb),
            "verb" => Some(Self::Field(Field::Verb)),
            "noun" => Some(Self::Field(Field::Noun)),
            _ => None,
        }
    }
}

/// Index of the best `(head_id, report)` entry; remaining ties go to the lower
/// head id.
pub fn select_best_index(entries: &[(usize, &MetricReport)], criterion: SelectionCriterion) -> Result<usize> {
    if entries.is_empty() {
        return Err(Error::Empty("no candidates to select from".into()));
    }
    let mut best = 0;
    for i in 1..entries.len() {
        let (a, b) = (criterion.key(entries[i].1), criterion.key(entries[best].1));
        let ord = a[0]
            .total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(entries[best].0.cmp(&entries[i].0));
        if ord.is_gt() {
            best = i;
        }
    }
    Ok(best)
}

pub fn select_best_head(candidates: &[EpochCandidate], criterion: SelectionCriterion) -> Result<&EpochCandidate> {
    let entries: Vec<(usize, &MetricReport)> = candidates.iter().map(|c| (c.head_id, &c.report)).collect();
    Ok(&candidates[select_best_index(&entries, criterion)?])
}

/// Epoch with the highest overall MT5R for each field; ties go to the earlier
/// epoch. Fields absent from every report are left out.
pub fn best_epoch_per_field(reports: &[(usize, MetricReport)]) -> Result<BTreeMap<Field, usize>> {
    if reports.is_empty() {
        return Err(Error::Empty("no epochs to choose from".into()));
    }
    let mut out = BTreeMap::new();
    for f in Field::ALL {
        let mut best: Option<(usize, f64)> = None;
        for (epoch, r) in reports {
            let Some(v) = r.overall(f) else { continue };
            let better = match best {
                None => true,
                Some((be, bv)) => v > bv || (v == bv && *epoch < be),
            };
            if better {
                best = Some((*epoch, v));
            }
        }
        if let Some((e, _)) = best {
            out.insert(f, e);
        }
    }
    Ok(out)
}
