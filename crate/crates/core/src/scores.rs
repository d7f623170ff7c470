use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedTensor, TensorData};
use crate::error::{Error, Result};
use crate::windows::{N_NOUN_CLASSES, N_VERB_CLASSES};

/// Number of verb-noun pairs emitted per instance.
pub const N_ACTION_PAIRS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionPair {
    pub verb: u32,
    pub noun: u32,
}

impl ActionPair {
    pub fn new(verb: u32, noun: u32) -> Self {
        Self { verb, noun }
    }

    pub fn parse(s: &str) -> Option<Self> {
        crate::windows::parse_pair_key(s).map(|(verb, noun)| Self { verb, noun })
    }
}

impl fmt::Display for ActionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.verb, self.noun)
    }
}

impl From<(u32, u32)> for ActionPair {
    fn from((verb, noun): (u32, u32)) -> Self {
        Self { verb, noun }
    }
}

/// Per-instance scores in the official label spaces. `action` is ordered by
/// descending score, ties by ascending pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub narration_id: String,
    pub verb: Vec<f64>,
    pub noun: Vec<f64>,
    pub action: Vec<(ActionPair, f64)>,
}

impl ScoreSet {
    pub fn action_score(&self, pair: ActionPair) -> Option<f64> {
        self.action.iter().find(|(p, _)| *p == pair).map(|(_, s)| *s)
    }

    pub fn is_official_shape(&self) -> bool {
        self.verb.len() == N_VERB_CLASSES && self.noun.len() == N_NOUN_CLASSES
    }
}

/// Descending score, then ascending pair.
pub fn sort_pairs(pairs: &mut [(ActionPair, f64)]) {
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

const SCORES_FORMAT: &str = "jfaa-scores";

#[derive(Serialize, Deserialize)]
struct ScoresMeta {
    format: String,
    ids: Vec<String>,
}

/// Serializes score sets into a tensor container. Action lists are stored as
/// indices into a shared pair-key table.
pub fn scores_to_container(sets: &[ScoreSet]) -> Result<Container> {
    let n = sets.len();
    let (nv, nn, na) = sets
        .first()
        .map_or((0, 0, 0), |s| (s.verb.len(), s.noun.len(), s.action.len()));
    let mut verb = Vec::with_capacity(n * nv);
    let mut noun = Vec::with_capacity(n * nn);
    let mut table: BTreeMap<ActionPair, u32> = BTreeMap::new();
    for s in sets {
        if s.verb.len() != nv || s.noun.len() != nn || s.action.len() != na {
            return Err(Error::Shape(format!(
                "{}: score set shape differs from the first instance",
                s.narration_id
            )));
        }
        verb.extend_from_slice(&s.verb);
        noun.extend_from_slice(&s.noun);
        for (p, _) in &s.action {
            table.entry(*p).or_insert(0);
        }
    }
    for (i, v) in table.values_mut().enumerate() {
        *v = i as u32;
    }
    let mut keys = Vec::with_capacity(table.len() * 2);
    for p in table.keys() {
        keys.extend_from_slice(&[p.verb, p.noun]);
    }
    let mut action_index = Vec::with_capacity(n * na);
    let mut action_score = Vec::with_capacity(n * na);
    for s in sets {
        for (p, v) in &s.action {
            action_index.push(table[p]);
            action_score.push(*v);
        }
    }
    let meta = ScoresMeta {
        format: SCORES_FORMAT.into(),
        ids: sets.iter().map(|s| s.narration_id.clone()).collect(),
    };
    Ok(Container {
        meta: serde_json::to_string(&meta).expect("meta serializes"),
        tensors: vec![
            NamedTensor::f64("verb", n, nv, verb),
            NamedTensor::f64("noun", n, nn, noun),
            NamedTensor::u32("pair_keys", table.len(), 2, keys),
            NamedTensor::u32("action_index", n, na, action_index),
            NamedTensor::f64("action_score", n, na, action_score),
        ],
    })
}

pub fn scores_from_container(c: &Container, path: &Path) -> Result<Vec<ScoreSet>> {
    let meta: ScoresMeta =
        serde_json::from_str(&c.meta).map_err(|e| Error::format(path, format!("scores header: {e}")))?;
    if meta.format != SCORES_FORMAT {
        return Err(Error::format(path, format!("not a scores file (format {:?})", meta.format)));
    }
    let n = meta.ids.len();
    let f64s = |name: &str| -> Result<(usize, &[f64])> {
        match c.get(name) {
            Some(NamedTensor { rows, cols, data: TensorData::F64(v), .. }) if *rows == n => Ok((*cols, v)),
            _ => Err(Error::format(path, format!("missing or malformed tensor {name}"))),
        }
    };
    let u32s = |name: &str| -> Result<(usize, usize, &[u32])> {
        match c.get(name) {
            Some(NamedTensor { rows, cols, data: TensorData::U32(v), .. }) => Ok((*rows, *cols, v)),
            _ => Err(Error::format(path, format!("missing or malformed tensor {name}"))),
        }
    };
    let (nv, verb) = f64s("verb")?;
    let (nn, noun) = f64s("noun")?;
    let (na, scores) = f64s("action_score")?;
    let (n_keys, key_cols, keys) = u32s("pair_keys")?;
    let (idx_rows, idx_cols, index) = u32s("action_index")?;
    if key_cols != 2 || idx_rows != n || idx_cols != na {
        return Err(Error::format(path, "pair table shape mismatch"));
    }
    let mut out = Vec::with_capacity(n);
    for (i, id) in meta.ids.into_iter().enumerate() {
        let mut action = Vec::with_capacity(na);
        for j in 0..na {
            let k = index[i * na + j] as usize;
            if k >= n_keys {
                return Err(Error::format(path, format!("pair index {k} outside table")));
            }
            action.push((ActionPair::new(keys[2 * k], keys[2 * k + 1]), scores[i * na + j]));
        }
        out.push(ScoreSet {
            narration_id: id,
            verb: verb[i * nv..(i + 1) * nv].to_vec(),
            noun: noun[i * nn..(i + 1) * nn].to_vec(),
            action,
        });
    }
    Ok(out)
}

pub fn write_scores(sets: &[ScoreSet], path: &Path) -> Result<()> {
    scores_to_container(sets)?.write(path)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreSet>> {
    scores_from_container(&Container::read(path)?, path)
}
