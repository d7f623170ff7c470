//! Seeded toy annotation sets for smoke runs and tests.

use rand::Rng;

use crate::seed;
use crate::windows::AnnotationRecord;

const SYNTH_STREAM: u64 = 0x73796e;

#[derive(Debug, Clone)]
pub struct SynthSplit {
    pub n_instances: usize,
    pub n_verbs: u32,
    pub n_nouns: u32,
    pub n_participants: u32,
    pub id_prefix: String,
    pub seed: u64,
}

/// Records with uniformly drawn (verb, noun) labels. Start times leave room
/// for a full observation window at any training gap.
pub fn synth_annotations(spec: &SynthSplit) -> Vec<AnnotationRecord> {
    let mut rng = seed::rng(spec.seed, &[SYNTH_STREAM, seed::hash_str(&spec.id_prefix)]);
    (0..spec.n_instances)
        .map(|i| {
            let start_s = (rng.random_range(600..60_000) as f64) / 100.0;
            let participant = rng.random_range(0..spec.n_participants.max(1)) + 1;
            AnnotationRecord {
                narration_id: format!("{}_{i:05}", spec.id_prefix),
                video_id: format!("P{participant:02}_{:02}", i % 7),
                participant_id: format!("P{participant:02}"),
                start_s,
                stop_s: start_s + 2.0,
                verb_class: rng.random_range(0..spec.n_verbs),
                noun_class: rng.random_range(0..spec.n_nouns),
            }
        })
        .collect()
}
