//! Challenge submission JSON.
//!
//! ```json
//! {"version": "0.2", "challenge": "action_anticipation",
//!  "sls_pt": 0, "sls_tl": 0, "sls_td": 0,
//!  "results": {"<narration_id>": {"verb": {"0": s, ...}, "noun": {...}, "action": {"v,n": s, ...}}}}
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::scores::{ActionPair, ScoreSet, N_ACTION_PAIRS};
use crate::windows::{N_NOUN_CLASSES, N_VERB_CLASSES};

pub const CHALLENGE: &str = "action_anticipation";
pub const SUBMISSION_VERSION: &str = "0.2";
const MAX_SLS: u64 = 5;

/// Supervision-level scale entries declared with a submission.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlsLevels {
    pub pt: u8,
    pub tl: u8,
    pub td: u8,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn check_set(s: &ScoreSet) -> Result<()> {
    let id = &s.narration_id;
    if s.verb.len() != N_VERB_CLASSES || s.noun.len() != N_NOUN_CLASSES {
        return Err(schema(format!(
            "{id}: {} verb and {} noun scores, expected {N_VERB_CLASSES} and {N_NOUN_CLASSES}",
            s.verb.len(),
            s.noun.len()
        )));
    }
    if s.action.len() != N_ACTION_PAIRS {
        return Err(schema(format!("{id}: {} action pairs, expected {N_ACTION_PAIRS}", s.action.len())));
    }
    let mut seen = HashSet::new();
    for (p, _) in &s.action {
        if p.verb as usize >= N_VERB_CLASSES || p.noun as usize >= N_NOUN_CLASSES {
            return Err(schema(format!("{id}: action pair {p} outside the label spaces")));
        }
        if !seen.insert(*p) {
            return Err(schema(format!("{id}: duplicate action pair {p}")));
        }
    }
    let finite = s.verb.iter().chain(&s.noun).chain(s.action.iter().map(|(_, v)| v)).all(|v| v.is_finite());
    if !finite {
        return Err(schema(format!("{id}: non-finite score")));
    }
    Ok(())
}

fn number(v: f64) -> Value {
    Value::Number(Number::from_f64(v).expect("scores are finite"))
}

/// Builds the submission document after validating every score set.
pub fn submission_value(sets: &[ScoreSet], sls: SlsLevels) -> Result<Value> {
    if sets.is_empty() {
        return Err(schema("submission has no instances"));
    }
    let mut results = Map::new();
    for s in sets {
        check_set(s)?;
        let vec_obj = |v: &[f64]| -> Value {
            Value::Object(v.iter().enumerate().map(|(i, &x)| (i.to_string(), number(x))).collect())
        };
        let mut entry = Map::new();
        entry.insert("verb".into(), vec_obj(&s.verb));
        entry.insert("noun".into(), vec_obj(&s.noun));
        entry.insert(
            "action".into(),
            Value::Object(s.action.iter().map(|(p, x)| (p.to_string(), number(*x))).collect()),
        );
        if results.insert(s.narration_id.clone(), Value::Object(entry)).is_some() {
            return Err(schema(format!("duplicate narration id {}", s.narration_id)));
        }
    }
    let mut doc = Map::new();
    doc.insert("version".into(), Value::from(SUBMISSION_VERSION));
    doc.insert("challenge".into(), Value::from(CHALLENGE));
    doc.insert("sls_pt".into(), Value::from(sls.pt));
    doc.insert("sls_tl".into(), Value::from(sls.tl));
    doc.insert("sls_td".into(), Value::from(sls.td));
    doc.insert("results".into(), Value::Object(results));
    let doc = Value::Object(doc);
    validate_submission(&doc)?;
    Ok(doc)
}

fn class_scores(id: &str, field: &str, v: Option<&Value>, n: usize) -> Result<Vec<f64>> {
    let obj = v
        .and_then(Value::as_object)
        .ok_or_else(|| schema(format!("{id}: missing {field} object")))?;
    if obj.len() != n {
        return Err(schema(format!("{id}: {} {field} entries, expected {n}", obj.len())));
    }
    let mut out = vec![f64::NAN; n];
    for (k, v) in obj {
        let c: usize = k
            .parse::<usize>()
            .ok()
            .filter(|&c| c < n && k == &c.to_string())
            .ok_or_else(|| schema(format!("{id}: bad {field} class key {k:?}")))?;
        out[c] = v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| schema(format!("{id}: {field} {k} is not a finite number")))?;
    }
    if out.iter().any(|x| x.is_nan()) {
        return Err(schema(format!("{id}: {field} classes missing")));
    }
    Ok(out)
}

fn parse_results(doc: &Value) -> Result<Vec<ScoreSet>> {
    let obj = doc.as_object().ok_or_else(|| schema("submission is not a JSON object"))?;
    let expected = ["version", "challenge", "sls_pt", "sls_tl", "sls_td", "results"];
    for k in obj.keys() {
        if !expected.contains(&k.as_str()) {
            return Err(schema(format!("unexpected top-level field {k:?}")));
        }
    }
    if !obj.get("version").is_some_and(Value::is_string) {
        return Err(schema("version must be a string"));
    }
    if obj.get("challenge").and_then(Value::as_str) != Some(CHALLENGE) {
        return Err(schema(format!("challenge must be {CHALLENGE:?}")));
    }
    for k in ["sls_pt", "sls_tl", "sls_td"] {
        match obj.get(k).and_then(Value::as_u64) {
            Some(v) if v <= MAX_SLS => {}
            _ => return Err(schema(format!("{k} must be an integer in 0..={MAX_SLS}"))),
        }
    }
    let results = obj
        .get("results")
        .and_then(Value::as_object)
        .ok_or_else(|| schema("results must be an object"))?;
    if results.is_empty() {
        return Err(schema("results is empty"));
    }
    let mut sets = Vec::with_capacity(results.len());
    for (id, entry) in results {
        let e = entry.as_object().ok_or_else(|| schema(format!("{id}: entry is not an object")))?;
        if e.len() != 3 {
            return Err(schema(format!("{id}: entry must hold exactly verb, noun and action")));
        }
        let verb = class_scores(id, "verb", e.get("verb"), N_VERB_CLASSES)?;
        let noun = class_scores(id, "noun", e.get("noun"), N_NOUN_CLASSES)?;
        let actions = e
            .get("action")
            .and_then(Value::as_object)
            .ok_or_else(|| schema(format!("{id}: missing action object")))?;
        if actions.len() != N_ACTION_PAIRS {
            return Err(schema(format!("{id}: {} action pairs, expected {N_ACTION_PAIRS}", actions.len())));
        }
        let mut action = Vec::with_capacity(N_ACTION_PAIRS);
        for (k, v) in actions {
            let p = ActionPair::parse(k)
                .filter(|p| k == &p.to_string())
                .ok_or_else(|| schema(format!("{id}: bad action key {k:?}")))?;
            let x = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| schema(format!("{id}: action {k} is not a finite number")))?;
            action.push((p, x));
        }
        let set = ScoreSet { narration_id: id.clone(), verb, noun, action };
        check_set(&set)?;
        sets.push(set);
    }
    Ok(sets)
}

/// Checks a parsed document against the submission schema.
pub fn validate_submission(doc: &Value) -> Result<()> {
    parse_results(doc).map(|_| ())
}

/// Validates, then writes. Nothing is written for an invalid submission.
pub fn write_submission(sets: &[ScoreSet], sls: SlsLevels, path: &Path) -> Result<()> {
    let doc = submission_value(sets, sls)?;
    let mut text = serde_json::to_string(&doc).expect("submission serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses and validates a submission; score sets keep file order.
pub fn read_submission(path: &Path) -> Result<Vec<ScoreSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    parse_results(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::top100_action_pairs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sets(n: usize) -> Vec<ScoreSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..n)
            .map(|i| {
                let verb: Vec<f64> = (0..97).map(|_| rng.random_range(-5.0..5.0)).collect();
                let noun: Vec<f64> = (0..300).map(|_| rng.random::<f64>() * 1e-3).collect();
                let vocab: Vec<ActionPair> = (0..130).map(|k| ActionPair::new(k % 97, (k * 7) % 300)).collect();
                let scores: Vec<f64> = vocab.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
                let action = top100_action_pairs(&scores, &vocab, &verb, &noun).unwrap();
                ScoreSet { narration_id: format!("P01_{i:03}"), verb, noun, action }
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.json");
        let s = sets(5);
        write_submission(&s, SlsLevels { pt: 2, tl: 3, td: 4 }, &path).unwrap();
        assert_eq!(read_submission(&path).unwrap(), s);
        let doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc["challenge"], CHALLENGE);
        assert_eq!(doc["sls_tl"], 3);
    }

    #[test]
    fn ninety_nine_pairs_refused_and_nothing_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.json");
        let mut s = sets(2);
        s[1].action.pop();
        let err = write_submission(&s, SlsLevels::default(), &path).unwrap_err();
        assert!(err.to_string().contains("99 action pairs"), "{err}");
        assert!(!path.exists());
    }

    #[test]
    fn other_violations_refused() {
        let base = sets(1);
        let mut dup = base.clone();
        dup[0].action[1].0 = dup[0].action[0].0;
        let mut short = base.clone();
        short[0].verb.pop();
        let mut nan = base.clone();
        nan[0].noun[4] = f64::NAN;
        let twice = [base[0].clone(), base[0].clone()];
        for bad in [dup, short, nan, twice.to_vec()] {
            assert!(matches!(submission_value(&bad, SlsLevels::default()), Err(Error::Schema(_))));
        }
        assert!(submission_value(&base, SlsLevels { pt: 6, tl: 0, td: 0 }).is_err());
    }

    #[test]
    fn validator_rejects_tampered_documents() {
        let good = submission_value(&sets(1), SlsLevels::default()).unwrap();
        validate_submission(&good).unwrap();
        let id = "P01_000";
        let mutate = |f: &dyn Fn(&mut Value)| {
            let mut d = good.clone();
            f(&mut d);
            validate_submission(&d).is_err()
        };
        assert!(mutate(&|d| d["challenge"] = "action_recognition".into()));
        assert!(mutate(&|d| d["sls_pt"] = 1.5.into()));
        assert!(mutate(&|d| d["extra"] = 1.into()));
        assert!(mutate(&|d| {
            d["results"][id]["verb"].as_object_mut().unwrap().remove("96");
        }));
        assert!(mutate(&|d| {
            let a = d["results"][id]["action"].as_object_mut().unwrap();
            let k = a.keys().next().unwrap().clone();
            a.remove(&k);
        }));
        assert!(mutate(&|d| {
            d["results"][id]["action"].as_object_mut().unwrap().insert("97,0".into(), 1.0.into());
        }));
        assert!(mutate(&|d| d["results"][id]["noun"]["3"] = "x".into()));
    }
}
