//! Expansion to the official label spaces, top-100 pair export and the
//! field-aware weighted ensemble.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{class_balanced_recall, in_topk, pair_in_top5, Field, MetricReport, TOP_K};
use crate::scores::{sort_pairs, ActionPair, ScoreSet, N_ACTION_PAIRS};
use crate::windows::AnnotationRecord;

/// Copies observed-class scores into an official-size vector. Unobserved
/// classes get `min(raw) - 1` so they rank below every observed class.
pub fn expand_scores(raw: &[f64], mapping: &[u32], official_size: usize) -> Result<Vec<f64>> {
    if raw.len() != mapping.len() {
        return Err(Error::Shape(format!("{} scores but {} mapped classes", raw.len(), mapping.len())));
    }
    let floor = raw.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let floor = if floor.is_finite() { floor } else { 0.0 };
    let mut out = vec![floor; official_size];
    let mut seen = vec![false; official_size];
    for (&s, &id) in raw.iter().zip(mapping) {
        let id = id as usize;
        if id >= official_size {
            return Err(Error::ClassOutOfRange { field: "mapping", id: id as i64, limit: official_size });
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::Shape(format!("class {id} is mapped twice")));
        }
        out[id] = s;
    }
    Ok(out)
}

/// The [`N_ACTION_PAIRS`] best pairs. With a smaller vocabulary the list is
/// padded with the unlisted pairs of largest expanded verb + noun score, given
/// scores below every native pair.
pub fn top100_action_pairs(
    action_scores: &[f64],
    vocab: &[ActionPair],
    verb_expanded: &[f64],
    noun_expanded: &[f64],
) -> Result<Vec<(ActionPair, f64)>> {
    top_action_pairs(action_scores, vocab, verb_expanded, noun_expanded, N_ACTION_PAIRS)
}

pub fn top_action_pairs(
    action_scores: &[f64],
    vocab: &[ActionPair],
    verb_expanded: &[f64],
    noun_expanded: &[f64],
    n: usize,
) -> Result<Vec<(ActionPair, f64)>> {
    if action_scores.len() != vocab.len() {
        return Err(Error::Shape(format!(
            "{} action scores for {} vocabulary pairs",
            action_scores.len(),
            vocab.len()
        )));
    }
    if vocab.is_empty() {
        return Err(Error::Empty("action vocabulary is empty".into()));
    }
    let mut pairs: Vec<(ActionPair, f64)> = vocab.iter().copied().zip(action_scores.iter().copied()).collect();
    sort_pairs(&mut pairs);
    let mut seen = HashSet::new();
    if !pairs.iter().all(|(p, _)| seen.insert(*p)) {
        return Err(Error::Shape("duplicate pairs in the action vocabulary".into()));
    }
    if pairs.len() >= n {
        pairs.truncate(n);
        return Ok(pairs);
    }

    let needed = n - pairs.len();
    let present = seen;
    let mut extra: Vec<(ActionPair, f64)> = Vec::with_capacity(verb_expanded.len() * noun_expanded.len());
    for (v, &sv) in verb_expanded.iter().enumerate() {
        for (u, &su) in noun_expanded.iter().enumerate() {
            let p = ActionPair::new(v as u32, u as u32);
            if !present.contains(&p) {
                extra.push((p, sv + su));
            }
        }
    }
    if extra.len() < needed {
        return Err(Error::Shape(format!(
            "only {} candidate pairs available to pad {} native pairs to {n}",
            extra.len(),
            pairs.len()
        )));
    }
    let by_rank = |a: &(ActionPair, f64), b: &(ActionPair, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if needed < extra.len() {
        extra.select_nth_unstable_by(needed - 1, by_rank);
        extra.truncate(needed);
    }
    extra.sort_by(by_rank);
    let native_min = pairs.last().map(|(_, s)| *s).expect("vocabulary is non-empty");
    let top_sum = extra[0].1;
    pairs.extend(extra.into_iter().map(|(p, s)| (p, native_min - 1.0 + (s - top_sum))));
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Softmax,
    None,
}

pub fn normalize_scores(v: &[f64], mode: NormMode) -> Vec<f64> {
    match mode {
        NormMode::None => v.to_vec(),
        NormMode::Softmax => {
            let mut out = v.to_vec();
            crate::tensor::softmax_in_place(&mut out);
            out
        }
    }
}

/// Softmax (or identity) over the scores of a pair list, pairs kept.
fn normalize_pairs(pairs: &[(ActionPair, f64)], mode: NormMode) -> Vec<(ActionPair, f64)> {
    let values: Vec<f64> = pairs.iter().map(|(_, s)| *s).collect();
    pairs.iter().map(|(p, _)| *p).zip(normalize_scores(&values, mode)).collect()
}

/// One score source for the ensemble, typically the winning head of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub label: String,
    pub scores: Vec<ScoreSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weighted {
    /// Index into the candidate pool.
    pub candidate: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub mode: NormMode,
    pub verb: Vec<Weighted>,
    pub noun: Vec<Weighted>,
    pub action: Vec<Weighted>,
}

impl EnsembleConfig {
    /// Weight 1 on a single candidate for every field.
    pub fn single(candidate: usize, mode: NormMode) -> Self {
        let w = vec![Weighted { candidate, weight: 1.0 }];
        Self { mode, verb: w.clone(), noun: w.clone(), action: w }
    }

    pub fn field(&self, f: Field) -> &[Weighted] {
        match f {
            Field::Verb => &self.verb,
            Field::Noun => &self.noun,
            Field::Action => &self.action,
        }
    }

    pub fn field_mut(&mut self, f: Field) -> &mut Vec<Weighted> {
        match f {
            Field::Verb => &mut self.verb,
            Field::Noun => &mut self.noun,
            Field::Action => &mut self.action,
        }
    }

    pub fn validate(&self, n_candidates: usize) -> Result<()> {
        for f in Field::ALL {
            let ws = self.field(f);
            if ws.is_empty() {
                return Err(Error::Config(format!("{} ensemble has no candidates", f.as_str())));
            }
            for w in ws {
                if w.candidate >= n_candidates {
                    return Err(Error::Config(format!(
                        "{} ensemble references candidate {} of {n_candidates}",
                        f.as_str(),
                        w.candidate
                    )));
                }
                if !(w.weight.is_finite() && w.weight >= 0.0) {
                    return Err(Error::Config(format!("{} ensemble weight {} is invalid", f.as_str(), w.weight)));
                }
            }
            let total: f64 = ws.iter().map(|w| w.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("{} ensemble weights sum to {total}", f.as_str())));
            }
        }
        Ok(())
    }
}

/// Rows of every candidate aligned to the instance order of candidate 0.
fn align(pool: &[Candidate]) -> Result<Vec<Vec<&ScoreSet>>> {
    let first = pool.first().ok_or_else(|| Error::Empty("no ensemble candidates".into()))?;
    let ids: Vec<&str> = first.scores.iter().map(|s| s.narration_id.as_str()).collect();
    let mut out = Vec::with_capacity(pool.len());
    for c in pool {
        let by_id: HashMap<&str, &ScoreSet> = c.scores.iter().map(|s| (s.narration_id.as_str(), s)).collect();
        if by_id.len() != c.scores.len() || c.scores.len() != ids.len() {
            return Err(Error::Shape(format!(
                "candidate {} covers {} instances, expected {}",
                c.label,
                c.scores.len(),
                ids.len()
            )));
        }
        let rows = ids
            .iter()
            .map(|id| {
                by_id.get(id).copied().ok_or_else(|| {
                    Error::Shape(format!("candidate {} has no scores for {id}", c.label))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(rows);
    }
    Ok(out)
}

fn blend_vectors(parts: &[(&[f64], f64)], mode: NormMode) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for &(v, w) in parts {
        if w == 0.0 {
            continue;
        }
        let x = normalize_scores(v, mode);
        match acc.as_mut() {
            None => acc = Some(x.iter().map(|s| w * s).collect()),
            Some(a) => {
                if a.len() != x.len() {
                    return Err(Error::Shape(format!("score vectors of length {} and {}", a.len(), x.len())));
                }
                for (a, s) in a.iter_mut().zip(&x) {
                    *a += w * s;
                }
            }
        }
    }
    acc.ok_or_else(|| Error::Config("all ensemble weights are zero".into()))
}

fn blend_pairs(parts: &[(&[(ActionPair, f64)], f64)], mode: NormMode) -> Result<Vec<(ActionPair, f64)>> {
    let mut acc: BTreeMap<ActionPair, f64> = BTreeMap::new();
    let mut any = false;
    for &(pairs, w) in parts {
        if w == 0.0 {
            continue;
        }
        any = true;
        for (p, s) in normalize_pairs(pairs, mode) {
            match acc.get_mut(&p) {
                Some(a) => *a += w * s,
                None => {
                    acc.insert(p, w * s);
                }
            }
        }
    }
    if !any {
        return Err(Error::Config("all ensemble weights are zero".into()));
    }
    let mut out: Vec<(ActionPair, f64)> = acc.into_iter().collect();
    sort_pairs(&mut out);
    out.truncate(N_ACTION_PAIRS);
    Ok(out)
}

/// Blends each field separately with its own candidates and weights. Output
/// follows the instance order of the first pool entry.
pub fn field_ensemble(pool: &[Candidate], cfg: &EnsembleConfig) -> Result<Vec<ScoreSet>> {
    cfg.validate(pool.len())?;
    let rows = align(pool)?;
    let n = rows[0].len();
    (0..n)
        .map(|i| {
            let vec_parts = |f: Field, get: fn(&ScoreSet) -> &[f64]| -> Vec<(&[f64], f64)> {
                cfg.field(f).iter().map(|w| (get(rows[w.candidate][i]), w.weight)).collect()
            };
            let verb = blend_vectors(&vec_parts(Field::Verb, |s| &s.verb), cfg.mode)?;
            let noun = blend_vectors(&vec_parts(Field::Noun, |s| &s.noun), cfg.mode)?;
            let action_parts: Vec<(&[(ActionPair, f64)], f64)> = cfg
                .action
                .iter()
                .map(|w| (rows[w.candidate][i].action.as_slice(), w.weight))
                .collect();
            let action = blend_pairs(&action_parts, cfg.mode)?;
            Ok(ScoreSet { narration_id: rows[0][i].narration_id.clone(), verb, noun, action })
        })
        .collect()
}

/// All ways to split `steps` units over `k` slots, lexicographically
/// descending (mass on earlier slots first).
pub fn simplex_grid(k: usize, steps: usize) -> Vec<Vec<usize>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for c in (0..=left).rev() {
            cur.push(c);
            rec(k - 1, left - c, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k > 0 {
        rec(k, steps, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

/// Overall MT5R of one field for already-blended rows.
fn field_score(field: Field, blended: &FieldRows, records: &[&AnnotationRecord]) -> Result<f64> {
    let mt5r = match (field, blended) {
        (Field::Verb, FieldRows::Vectors(rows)) => class_balanced_recall(
            records.iter().zip(rows).map(|(r, v)| (r.verb_class, in_topk(v, r.verb_class as usize, TOP_K))),
        )?
        .mt5r,
        (Field::Noun, FieldRows::Vectors(rows)) => class_balanced_recall(
            records.iter().zip(rows).map(|(r, v)| (r.noun_class, in_topk(v, r.noun_class as usize, TOP_K))),
        )?
        .mt5r,
        (Field::Action, FieldRows::Pairs(rows)) => class_balanced_recall(
            records.iter().zip(rows).map(|(r, p)| (r.action(), pair_in_top5(p, r.action().into()))),
        )?
        .mt5r,
        _ => unreachable!("field and row kind always agree"),
    };
    Ok(mt5r)
}

enum FieldRows {
    Vectors(Vec<Vec<f64>>),
    Pairs(Vec<Vec<(ActionPair, f64)>>),
}

fn blend_field(
    field: Field,
    rows: &[Vec<&ScoreSet>],
    weights: &[Weighted],
    mode: NormMode,
) -> Result<FieldRows> {
    let n = rows[0].len();
    Ok(match field {
        Field::Verb | Field::Noun => FieldRows::Vectors(
            (0..n)
                .map(|i| {
                    let parts: Vec<(&[f64], f64)> = weights
                        .iter()
                        .map(|w| {
                            let s = rows[w.candidate][i];
                            (if field == Field::Verb { s.verb.as_slice() } else { s.noun.as_slice() }, w.weight)
                        })
                        .collect();
                    blend_vectors(&parts, mode)
                })
                .collect::<Result<_>>()?,
        ),
        Field::Action => FieldRows::Pairs(
            (0..n)
                .map(|i| {
                    let parts: Vec<(&[(ActionPair, f64)], f64)> =
                        weights.iter().map(|w| (rows[w.candidate][i].action.as_slice(), w.weight)).collect();
                    blend_pairs(&parts, mode)
                })
                .collect::<Result<_>>()?,
        ),
    })
}

/// Grid-search result for one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldFit {
    pub weights: Vec<Weighted>,
    pub mt5r: f64,
}

/// Per field, exhaustive search over the simplex grid with `steps` divisions
/// for the weights maximizing that field's validation MT5R. Ties prefer fewer
/// non-zero weights, then more weight on earlier candidates.
pub fn fit_ensemble_weights(
    pool: &[Candidate],
    field_candidates: &[Vec<usize>; 3],
    records: &[AnnotationRecord],
    steps: usize,
    mode: NormMode,
) -> Result<(EnsembleConfig, [FieldFit; 3])> {
    if steps == 0 {
        return Err(Error::Config("weight grid needs at least one step".into()));
    }
    let rows = align(pool)?;
    let by_id: HashMap<&str, &AnnotationRecord> = records.iter().map(|r| (r.narration_id.as_str(), r)).collect();
    let aligned: Vec<&AnnotationRecord> = rows[0]
        .iter()
        .map(|s| {
            by_id
                .get(s.narration_id.as_str())
                .copied()
                .ok_or_else(|| Error::Shape(format!("no label for {}", s.narration_id)))
        })
        .collect::<Result<_>>()?;
    if aligned.is_empty() {
        return Err(Error::Empty("no validation instances to fit ensemble weights".into()));
    }

    let mut fits = Vec::with_capacity(3);
    for field in Field::ALL {
        let cands = &field_candidates[field.index()];
        if cands.is_empty() {
            return Err(Error::Config(format!("no {} candidates to fit", field.as_str())));
        }
        if let Some(&c) = cands.iter().find(|&&c| c >= pool.len()) {
            return Err(Error::Config(format!("candidate {c} outside pool of {}", pool.len())));
        }
        let grid = simplex_grid(cands.len(), steps);
        let to_weights = |g: &[usize]| -> Vec<Weighted> {
            cands
                .iter()
                .zip(g)
                .map(|(&candidate, &u)| Weighted { candidate, weight: u as f64 / steps as f64 })
                .collect()
        };
        let scores: Vec<f64> = grid
            .par_iter()
            .map(|g| {
                let blended = blend_field(field, &rows, &to_weights(g), mode)?;
                field_score(field, &blended, &aligned)
            })
            .collect::<Result<_>>()?;
        let mut best = 0;
        let nnz = |g: &[usize]| g.iter().filter(|&&u| u > 0).count();
        for i in 1..grid.len() {
            let better = scores[i] > scores[best] || (scores[i] == scores[best] && nnz(&grid[i]) < nnz(&grid[best]));
            if better {
                best = i;
            }
        }
        // Zero weights are dropped from the emitted config.
        let weights: Vec<Weighted> = to_weights(&grid[best]).into_iter().filter(|w| w.weight > 0.0).collect();
        fits.push(FieldFit { weights, mt5r: scores[best] });
    }
    let [verb, noun, action]: [FieldFit; 3] = fits.try_into().expect("three fields");
    let cfg = EnsembleConfig {
        mode,
        verb: verb.weights.clone(),
        noun: noun.weights.clone(),
        action: action.weights.clone(),
    };
    Ok((cfg, [verb, noun, action]))
}

/// Default ensemble candidates: the best epoch of each field followed by the
/// `n_top_action` best epochs by action MT5R, without repeats. Ties go to the
/// earlier epoch.
pub fn candidate_epochs(best: &BTreeMap<Field, usize>, reports: &[(usize, MetricReport)], n_top_action: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for f in Field::ALL {
        if let Some(&e) = best.get(&f) {
            if !out.contains(&e) {
                out.push(e);
            }
        }
    }
    let mut ranked: Vec<(usize, f64)> = reports
        .iter()
        .map(|(e, r)| (*e, r.overall(Field::Action).unwrap_or(f64::NEG_INFINITY)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (e, _) in ranked.into_iter().take(n_top_action) {
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out
}
