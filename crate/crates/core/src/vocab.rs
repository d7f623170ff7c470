use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FieldLabels;
use crate::scores::ActionPair;
use crate::windows::AnnotationRecord;

/// Classes observed in the training split. The probe predicts over these;
/// its scores are expanded to the official label spaces afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub verbs: Vec<u32>,
    pub nouns: Vec<u32>,
    pub pairs: Vec<ActionPair>,
    #[serde(skip)]
    index: Index,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Index {
    verb: HashMap<u32, usize>,
    noun: HashMap<u32, usize>,
    pair: HashMap<ActionPair, usize>,
}

impl LabelVocab {
    pub fn from_records(records: &[AnnotationRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("cannot build a label vocabulary from no records".into()));
        }
        let verbs: BTreeSet<u32> = records.iter().map(|r| r.verb_class).collect();
        let nouns: BTreeSet<u32> = records.iter().map(|r| r.noun_class).collect();
        let pairs: BTreeSet<ActionPair> = records.iter().map(|r| r.action().into()).collect();
        Ok(Self::new(
            verbs.into_iter().collect(),
            nouns.into_iter().collect(),
            pairs.into_iter().collect(),
        ))
    }

    pub fn new(verbs: Vec<u32>, nouns: Vec<u32>, pairs: Vec<ActionPair>) -> Self {
        let mut v = Self { verbs, nouns, pairs, index: Index::default() };
        v.reindex();
        v
    }

    /// Rebuilds lookup tables, e.g. after deserializing.
    pub fn reindex(&mut self) {
        self.index = Index {
            verb: self.verbs.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
            noun: self.nouns.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
            pair: self.pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect(),
        };
    }

    pub fn verb_index(&self, class: u32) -> Option<usize> {
        self.index.verb.get(&class).copied()
    }

    pub fn noun_index(&self, class: u32) -> Option<usize> {
        self.index.noun.get(&class).copied()
    }

    pub fn pair_index(&self, pair: ActionPair) -> Option<usize> {
        self.index.pair.get(&pair).copied()
    }

    /// Training targets for a record. Verb and noun must be in the vocabulary;
    /// an unknown pair leaves the action label absent.
    pub fn labels(&self, r: &AnnotationRecord) -> Result<FieldLabels> {
        let verb = self.verb_index(r.verb_class).ok_or_else(|| {
            Error::Shape(format!("{}: verb {} not in the training vocabulary", r.narration_id, r.verb_class))
        })?;
        let noun = self.noun_index(r.noun_class).ok_or_else(|| {
            Error::Shape(format!("{}: noun {} not in the training vocabulary", r.narration_id, r.noun_class))
        })?;
        Ok(FieldLabels { verb, noun, action: self.pair_index(r.action().into()) })
    }
}
