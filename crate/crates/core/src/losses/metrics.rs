//! Class-balanced top-k recall (Mean Top-5 Recall) and the per-field,
//! per-subset report built on it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::{ActionPair, ScoreSet};
use crate::windows::{AnnotationRecord, SubsetFlags};

pub const TOP_K: usize = 5;

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_by(by_rank);
    idx
}

/// Whether `class` is among the `k` best: fewer than `k` classes outrank it.
pub fn in_topk(scores: &[f64], class: usize, k: usize) -> bool {
    let s = scores[class];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < class))
        .count();
    ahead < k
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub hits: usize,
    pub count: usize,
}

impl ClassRecall {
    pub fn recall(&self) -> f64 {
        self.hits as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallResult<K: Ord> {
    /// Percentage in `[0, 100]`.
    pub mt5r: f64,
    pub per_class: BTreeMap<K, ClassRecall>,
}

/// Per-class recall averaged over the classes that occur.
pub fn class_balanced_recall<K: Ord>(
    outcomes: impl IntoIterator<Item = (K, bool)>,
) -> Result<RecallResult<K>> {
    let mut per_class: BTreeMap<K, ClassRecall> = BTreeMap::new();
    for (class, hit) in outcomes {
        let e = per_class.entry(class).or_default();
        e.count += 1;
        e.hits += usize::from(hit);
    }
    if per_class.is_empty() {
        return Err(Error::Empty("no instances in the evaluated subset".into()));
    }
    let sum = per_class.values().map(ClassRecall::recall).sum::<f64>();
    Ok(RecallResult { mt5r: 100.0 * sum / per_class.len() as f64, per_class })
}

/// Mean Top-5 Recall over score rows; `mask` selects the instances evaluated.
pub fn mean_top5_recall<R: AsRef<[f64]>>(
    rows: &[R],
    labels: &[usize],
    mask: Option<&[bool]>,
) -> Result<RecallResult<usize>> {
    if rows.len() != labels.len() || mask.is_some_and(|m| m.len() != labels.len()) {
        return Err(Error::Shape(format!(
            "{} score rows, {} labels, {} mask entries",
            rows.len(),
            labels.len(),
            mask.map_or(labels.len(), <[bool]>::len)
        )));
    }
    for (i, (row, &label)) in rows.iter().zip(labels).enumerate() {
        if label >= row.as_ref().len() {
            return Err(Error::Shape(format!("instance {i}: label {label} outside score row")));
        }
    }
    class_balanced_recall(
        rows.iter()
            .zip(labels)
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
            .map(|(_, (row, &label))| (label, in_topk(row.as_ref(), label, TOP_K))),
    )
}

/// Action hit: the exact pair is among the five best emitted pairs. Pairs
/// missing from the emitted list rank below every listed pair.
pub fn action_in_top5(set: &ScoreSet, pair: ActionPair) -> bool {
    pair_in_top5(&set.action, pair)
}

pub fn pair_in_top5(pairs: &[(ActionPair, f64)], pair: ActionPair) -> bool {
    let Some(s) = pairs.iter().find(|(p, _)| *p == pair).map(|(_, s)| *s) else {
        return false;
    };
    let ahead = pairs
        .iter()
        .filter(|(p, v)| *v > s || (*v == s && *p < pair))
        .count();
    ahead < TOP_K
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Verb,
    Noun,
    Action,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::Verb, Field::Noun, Field::Action];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Verb => "verb",
            Field::Noun => "noun",
            Field::Action => "action",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Overall,
    Unseen,
    Tail,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Overall, Subset::Unseen, Subset::Tail];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Overall => "overall",
            Subset::Unseen => "unseen",
            Subset::Tail => "tail",
        }
    }

    fn includes(self, field: Field, flags: &SubsetFlags) -> bool {
        match (self, field) {
            (Subset::Overall, _) => flags.overall,
            (Subset::Unseen, _) => flags.unseen,
            (Subset::Tail, Field::Verb) => flags.tail_verb,
            (Subset::Tail, Field::Noun) => flags.tail_noun,
            (Subset::Tail, Field::Action) => flags.tail_action,
        }
    }
}

/// MT5R for every field and subset. An empty subset is `None` ("absent"),
/// never 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mt5r: [[Option<f64>; 3]; 3],
    /// Overall-subset per-class table, keyed by class id (`"v,n"` for actions).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<Field, BTreeMap<String, ClassRecall>>,
}

impl MetricReport {
    pub fn get(&self, field: Field, subset: Subset) -> Option<f64> {
        self.mt5r[field.index()][subset as usize]
    }

    pub fn set(&mut self, field: Field, subset: Subset, v: Option<f64>) {
        self.mt5r[field.index()][subset as usize] = v;
    }

    pub fn overall(&self, field: Field) -> Option<f64> {
        self.get(field, Subset::Overall)
    }

    /// Column keys in report order: `{field}_{subset}_mt5r`.
    pub fn keys() -> Vec<String> {
        Field::ALL
            .iter()
            .flat_map(|f| Subset::ALL.iter().map(move |s| format!("{}_{}_mt5r", f.as_str(), s.as_str())))
            .collect()
    }

    pub fn flat(&self) -> Vec<(String, Option<f64>)> {
        Field::ALL
            .iter()
            .flat_map(|&f| {
                Subset::ALL
                    .iter()
                    .map(move |&s| (format!("{}_{}_mt5r", f.as_str(), s.as_str()), self.get(f, s)))
            })
            .collect()
    }

    pub fn from_flat(values: &[(String, Option<f64>)]) -> Result<Self> {
        let mut r = MetricReport::default();
        let lookup: HashMap<&str, Option<f64>> = values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        for f in Field::ALL {
            for s in Subset::ALL {
                let key = format!("{}_{}_mt5r", f.as_str(), s.as_str());
                let v = lookup
                    .get(key.as_str())
                    .ok_or_else(|| Error::Schema(format!("missing metric {key}")))?;
                r.set(f, s, *v);
            }
        }
        Ok(r)
    }

    /// Flat JSON object; absent subsets are `null`.
    pub fn to_json(&self, with_table: bool) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        for (k, v) in self.flat() {
            obj.insert(k, v.map_or(serde_json::Value::Null, serde_json::Value::from));
        }
        if with_table && !self.per_class.is_empty() {
            obj.insert(
                "per_class".into(),
                serde_json::to_value(&self.per_class).expect("table serializes"),
            );
        }
        serde_json::Value::Object(obj)
    }
}

fn absent_if_empty<K: Ord>(r: Result<RecallResult<K>>) -> Result<Option<RecallResult<K>>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Empty(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates score sets against annotations. Score sets are matched to
/// records by narration id.
pub fn evaluate_fields(
    score_sets: &[ScoreSet],
    records: &[AnnotationRecord],
    flags: &[SubsetFlags],
) -> Result<MetricReport> {
    if records.len() != flags.len() {
        return Err(Error::Shape(format!("{} records but {} flag rows", records.len(), flags.len())));
    }
    if score_sets.len() != records.len() {
        return Err(Error::Shape(format!(
            "{} score sets for {} records",
            score_sets.len(),
            records.len()
        )));
    }
    let by_id: HashMap<&str, &ScoreSet> = score_sets.iter().map(|s| (s.narration_id.as_str(), s)).collect();
    let mut aligned = Vec::with_capacity(records.len());
    for r in records {
        let s = by_id
            .get(r.narration_id.as_str())
            .ok_or_else(|| Error::Shape(format!("no scores for narration {}", r.narration_id)))?;
        if (r.verb_class as usize) >= s.verb.len() || (r.noun_class as usize) >= s.noun.len() {
            return Err(Error::Shape(format!("score vectors of {} are too short", r.narration_id)));
        }
        aligned.push(*s);
    }

    let hit = |field: Field, r: &AnnotationRecord, s: &ScoreSet| -> bool {
        match field {
            Field::Verb => in_topk(&s.verb, r.verb_class as usize, TOP_K),
            Field::Noun => in_topk(&s.noun, r.noun_class as usize, TOP_K),
            Field::Action => action_in_top5(s, ActionPair::from(r.action())),
        }
    };

    let mut report = MetricReport::default();
    for field in Field::ALL {
        for subset in Subset::ALL {
            let res = absent_if_empty(class_balanced_recall(
                records
                    .iter()
                    .zip(&aligned)
                    .zip(flags)
                    .filter(|(_, f)| subset.includes(field, f))
                    .map(|((r, s), _)| (class_key(field, r), hit(field, r, s))),
            ))?;
            report.set(field, subset, res.as_ref().map(|r| r.mt5r));
            if subset == Subset::Overall {
                if let Some(res) = res {
                    let table = res
                        .per_class
                        .into_iter()
                        .map(|((v, n), c)| {
                            let key = match field {
                                Field::Verb => v.to_string(),
                                Field::Noun => n.to_string(),
                                Field::Action => format!("{v},{n}"),
                            };
                            (key, c)
                        })
                        .collect();
                    report.per_class.insert(field, table);
                }
            }
        }
    }
    Ok(report)
}

fn class_key(field: Field, r: &AnnotationRecord) -> (u32, u32) {
    match field {
        Field::Verb => (r.verb_class, 0),
        Field::Noun => (0, r.noun_class),
        Field::Action => r.action(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windows::SubsetFlags;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topk_tie_break_by_index() {
        assert_eq!(topk_indices(&[0.1, 0.9, 0.9], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[0.1, 0.9, 0.9], 10), vec![1, 2, 0]);
        assert_eq!(topk_indices(&[], 3), Vec::<usize>::new());
        assert_eq!(topk_indices(&[1.0, 2.0], 0), Vec::<usize>::new());
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let n = rng.random_range(1..40);
            // coarse values so ties are common
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8))).collect();
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(5);
            assert_eq!(topk_indices(&scores, 5), oracle);
        }
    }

    #[test]
    fn perfect_predictor_scores_100() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| (0..10).map(|j| if j == i { 1.0 } else { 0.0 }).collect()).collect();
        let labels: Vec<usize> = (0..10).collect();
        assert_eq!(mean_top5_recall(&rows, &labels, None).unwrap().mt5r, 100.0);
    }

    #[test]
    fn three_instance_fixture() {
        // 7 classes; class 0 twice (one hit), class 1 once (hit)
        let hit0 = vec![9.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let miss0 = vec![0.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0];
        let hit1 = vec![0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let r = mean_top5_recall(&[hit0, miss0, hit1], &[0, 0, 1], None).unwrap();
        assert_eq!(r.mt5r, 75.0);
        assert_eq!(r.per_class[&0], ClassRecall { hits: 1, count: 2 });
    }

    #[test]
    fn class_balanced_not_instance_balanced() {
        let hit = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut rows = vec![hit; 9];
        let labels_hit = vec![0usize; 9];
        // class 6 once, ranked last of 7
        rows.push(vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        let mut labels = labels_hit;
        labels.push(6);
        let r = mean_top5_recall(&rows, &labels, None).unwrap();
        assert_eq!(r.mt5r, 50.0);
    }

    #[test]
    fn empty_mask_errors() {
        let rows = vec![vec![1.0, 0.0]];
        assert!(matches!(mean_top5_recall(&rows, &[0], Some(&[false])), Err(Error::Empty(_))));
        assert!(mean_top5_recall(&rows, &[0, 1], None).is_err());
        assert!(mean_top5_recall(&rows, &[2], None).is_err());
    }

    fn brute_force(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort();
        classes.dedup();
        let mut sum = 0.0;
        for &c in &classes {
            let mut hits = 0;
            let mut count = 0;
            for (row, &l) in rows.iter().zip(labels) {
                if l != c {
                    continue;
                }
                count += 1;
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                if order[..5].contains(&c) {
                    hits += 1;
                }
            }
            sum += hits as f64 / count as f64;
        }
        100.0 * sum / classes.len() as f64
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..50).map(|_| f64::from(rng.random_range(0..6u8))).collect())
            .collect();
        let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..50)).collect();
        assert_eq!(mean_top5_recall(&rows, &labels, None).unwrap().mt5r, brute_force(&rows, &labels));
    }

    #[test]
    fn new_class_changes_only_its_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows: Vec<Vec<f64>> = (0..40).map(|_| (0..12).map(|_| rng.random()).collect()).collect();
        let mut labels: Vec<usize> = (0..40).map(|_| rng.random_range(0..10)).collect();
        let before = mean_top5_recall(&rows, &labels, None).unwrap();
        rows.push((0..12).map(|_| rng.random()).collect());
        labels.push(11);
        let after = mean_top5_recall(&rows, &labels, None).unwrap();
        assert_eq!(after.per_class.len(), before.per_class.len() + 1);
        for (c, v) in &before.per_class {
            assert_eq!(after.per_class[c], *v);
        }
        let n = before.per_class.len() as f64;
        let expected = (before.mt5r * n + 100.0 * after.per_class[&11].recall()) / (n + 1.0);
        assert!((after.mt5r - expected).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 8), 1..30),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = rows.iter().map(|_| rng.random_range(0..8)).collect();
            let transformed: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| (2.0 * x).exp() + 1.0).collect()).collect();
            let a = mean_top5_recall(&rows, &labels, None).unwrap();
            let b = mean_top5_recall(&transformed, &labels, None).unwrap();
            prop_assert_eq!(a.mt5r, b.mt5r);
        }
    }

    fn score_set(id: &str, verb_top: u32, noun_top: u32, pair: Option<(u32, u32)>) -> ScoreSet {
        let mut verb = vec![0.0; 97];
        verb[verb_top as usize] = 1.0;
        let mut noun = vec![0.0; 300];
        noun[noun_top as usize] = 1.0;
        let mut action: Vec<(ActionPair, f64)> = (0..100u32).map(|i| (ActionPair::new(90, i), -(i as f64))).collect();
        if let Some(p) = pair {
            action[0] = (p.into(), 10.0);
        }
        ScoreSet { narration_id: id.into(), verb, noun, action }
    }

    fn record(id: &str, participant: &str, verb: u32, noun: u32) -> AnnotationRecord {
        AnnotationRecord {
            narration_id: id.into(),
            video_id: "v".into(),
            participant_id: participant.into(),
            start_s: 5.0,
            stop_s: 6.0,
            verb_class: verb,
            noun_class: noun,
        }
    }

    fn flags(unseen: bool, tail: bool) -> SubsetFlags {
        SubsetFlags { overall: true, unseen, tail_verb: tail, tail_noun: tail, tail_action: tail }
    }

    #[test]
    fn single_instance_all_hit_and_absent_subsets() {
        let s = score_set("a", 3, 4, Some((3, 4)));
        let r = record("a", "P01", 3, 4);
        let rep = evaluate_fields(&[s], &[r], &[flags(false, false)]).unwrap();
        for f in Field::ALL {
            assert_eq!(rep.overall(f), Some(100.0));
            assert_eq!(rep.get(f, Subset::Unseen), None);
            assert_eq!(rep.get(f, Subset::Tail), None);
        }
        let json = rep.to_json(false);
        assert!(json["verb_unseen_mt5r"].is_null());
        assert_eq!(json["action_overall_mt5r"], 100.0);
    }

    #[test]
    fn action_requires_exact_pair_in_top5() {
        // right verb and noun individually, but the pair sits at rank 6
        let mut s = score_set("a", 3, 4, None);
        s.action[5] = (ActionPair::new(3, 4), -5.0);
        let rep = evaluate_fields(&[s.clone()], &[record("a", "P", 3, 4)], &[flags(false, false)]).unwrap();
        assert_eq!(rep.overall(Field::Verb), Some(100.0));
        assert_eq!(rep.overall(Field::Action), Some(0.0));
        s.action[4] = (ActionPair::new(3, 4), -4.0);
        s.action[5] = (ActionPair::new(90, 5), -5.0);
        let rep = evaluate_fields(&[s], &[record("a", "P", 3, 4)], &[flags(false, false)]).unwrap();
        assert_eq!(rep.overall(Field::Action), Some(100.0));
    }

    #[test]
    fn twelve_instance_fixture() {
        // (id, participant, verb, noun, verb hit, noun hit, action hit, unseen, tail)
        let rows = [
            ("i0", "P01", 0, 0, true, true, true, false, false),
            ("i1", "P01", 0, 1, false, true, false, false, false),
            ("i2", "P02", 1, 1, true, false, false, false, true),
            ("i3", "P09", 1, 2, true, true, true, true, true),
            ("i4", "P09", 2, 2, false, false, false, true, false),
            ("i5", "P09", 2, 0, true, true, true, true, false),
            ("i6", "P03", 3, 3, false, true, false, false, true),
            ("i7", "P03", 3, 3, true, true, true, false, true),
            ("i8", "P04", 4, 4, true, false, false, false, false),
            ("i9", "P09", 4, 5, false, false, false, true, false),
            ("i10", "P05", 5, 5, true, true, true, false, false),
            ("i11", "P05", 0, 0, false, false, false, false, false),
        ];
        let mut sets = Vec::new();
        let mut recs = Vec::new();
        let mut fl = Vec::new();
        for &(id, part, v, n, vh, nh, ah, unseen, tail) in &rows {
            let wrong_v = (v + 50) % 97;
            let wrong_n = (n + 50) % 300;
            let s = score_set(
                id,
                if vh { v } else { wrong_v },
                if nh { n } else { wrong_n },
                if ah { Some((v, n)) } else { None },
            );
            // a miss needs more than 5 competitors above the true class
            let mut s = s;
            if !vh {
                for k in 0..6 {
                    s.verb[(v as usize + 10 + k) % 97] = 0.5;
                }
            }
            if !nh {
                for k in 0..6 {
                    s.noun[(n as usize + 10 + k) % 300] = 0.5;
                }
            }
            sets.push(s);
            recs.push(record(id, part, v, n));
            fl.push(flags(unseen, tail));
        }
        let rep = evaluate_fields(&sets, &recs, &fl).unwrap();

        // hand computation, class-balanced per field and subset
        let oracle = |field: usize, keep: &dyn Fn(usize) -> bool| -> Option<f64> {
            let mut tbl: BTreeMap<(u32, u32), (usize, usize)> = BTreeMap::new();
            for (i, r) in rows.iter().enumerate() {
                if !keep(i) {
                    continue;
                }
                let key = match field {
                    0 => (r.2, 0),
                    1 => (0, r.3),
                    _ => (r.2, r.3),
                };
                let hit = [r.4, r.5, r.6][field];
                let e = tbl.entry(key).or_default();
                e.0 += usize::from(hit);
                e.1 += 1;
            }
            if tbl.is_empty() {
                return None;
            }
            Some(100.0 * tbl.values().map(|(h, c)| *h as f64 / *c as f64).sum::<f64>() / tbl.len() as f64)
        };
        for (fi, f) in Field::ALL.iter().enumerate() {
            assert_eq!(rep.overall(*f), oracle(fi, &|_| true));
            assert_eq!(rep.get(*f, Subset::Unseen), oracle(fi, &|i| rows[i].7));
            assert_eq!(rep.get(*f, Subset::Tail), oracle(fi, &|i| rows[i].8));
        }
        // spot values: verb overall classes 0..5 → 1/3, 2/2, 1/2, 1/2, 1/2, 1/1
        let expected_verb = 100.0 * (1.0 / 3.0 + 1.0 + 0.5 + 0.5 + 0.5 + 1.0) / 6.0;
        assert!((rep.overall(Field::Verb).unwrap() - expected_verb).abs() < 1e-12);
    }

    #[test]
    fn id_mismatch_errors() {
        let s = score_set("a", 1, 1, None);
        assert!(evaluate_fields(&[s], &[record("b", "P", 1, 1)], &[flags(false, false)]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut r = MetricReport::default();
        r.set(Field::Noun, Subset::Tail, Some(12.5));
        let back = MetricReport::from_flat(&r.flat()).unwrap();
        assert_eq!(back.mt5r, r.mt5r);
        assert_eq!(MetricReport::keys()[0], "verb_overall_mt5r");
        assert_eq!(MetricReport::keys().len(), 9);
    }
}
