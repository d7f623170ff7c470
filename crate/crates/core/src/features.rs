//! Frozen-backbone feature contract: observed-context tokens followed by
//! predicted near-future tokens, loaded from disk or synthesized.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::container::Reader;
use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::Matrix;
use crate::windows::{AnnotationRecord, ClipSpec};

pub const FEATURE_MAGIC: &[u8; 8] = b"JFAAFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 24;
pub const FEATURE_EXT: &str = "feat";

/// Segment ids attached to assembled tokens.
pub const SEGMENT_OBSERVED: u8 = 0;
pub const SEGMENT_PREDICTED: u8 = 1;

pub const SYNTH_NOISE_SCALE: f64 = 0.5;
pub const SYNTH_ANCHOR_NORM: f64 = 1.0;

/// Token matrices are stored row-major as 32-bit floats, as they come off the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub narration_id: String,
    pub d_model: usize,
    pub n_obs: usize,
    pub n_pred: usize,
    pub observed: Vec<f32>,
    pub predicted: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(
        narration_id: impl Into<String>,
        d_model: usize,
        observed: Vec<f32>,
        predicted: Vec<f32>,
    ) -> Result<Self> {
        if d_model == 0 {
            return Err(Error::Shape("d_model must be positive".into()));
        }
        if !observed.len().is_multiple_of(d_model) || !predicted.len().is_multiple_of(d_model) {
            return Err(Error::Shape(format!(
                "token buffers ({}, {}) are not multiples of d_model {d_model}",
                observed.len(),
                predicted.len()
            )));
        }
        let fs = Self {
            narration_id: narration_id.into(),
            d_model,
            n_obs: observed.len() / d_model,
            n_pred: predicted.len() / d_model,
            observed,
            predicted,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_obs == 0 {
            return Err(Error::Shape("at least one observed token is required".into()));
        }
        if self.observed.len() != self.n_obs * self.d_model
            || self.predicted.len() != self.n_pred * self.d_model
        {
            return Err(Error::Shape(format!(
                "{}: buffers do not match {}+{} tokens of width {}",
                self.narration_id, self.n_obs, self.n_pred, self.d_model
            )));
        }
        if !self.observed.iter().chain(&self.predicted).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("features of {}", self.narration_id)));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.n_obs + self.n_pred
    }

    pub fn segment_ids(&self) -> Vec<u8> {
        let mut ids = vec![SEGMENT_OBSERVED; self.n_obs];
        ids.resize(self.n_tokens(), SEGMENT_PREDICTED);
        ids
    }
}

/// Observed rows first, then predicted rows.
pub fn assemble_tokens(fs: &FeatureSequence) -> Result<Matrix> {
    fs.validate()?;
    let data = fs
        .observed
        .iter()
        .chain(&fs.predicted)
        .map(|&v| f64::from(v))
        .collect();
    Matrix::from_vec(fs.n_tokens(), fs.d_model, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub d_model: usize,
    pub n_obs: usize,
    pub n_pred: usize,
    pub seed: u64,
    pub separability: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_obs: 16,
            n_pred: 8,
            seed: 0,
            separability: 1.0,
        }
    }
}

fn unit_gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Unit-norm anchor for a (verb, noun) label: the normalized sum of a verb
/// direction and a noun direction, so pairs sharing a verb share structure.
pub fn class_anchor(verb: u32, noun: u32, d_model: usize, seed: u64) -> Vec<f64> {
    let a = unit_gaussian(&mut seed::rng(seed, &[stream::VERB_ANCHOR, u64::from(verb)]), d_model);
    let b = unit_gaussian(&mut seed::rng(seed, &[stream::NOUN_ANCHOR, u64::from(noun)]), d_model);
    let mut v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x *= SYNTH_ANCHOR_NORM / norm);
    }
    v
}

/// Deterministic stand-in for backbone features. Each token is Gaussian noise
/// (per-coordinate std `0.5 / sqrt(D)`, so the noise vector has norm near 0.5)
/// plus `separability` times the label anchor. `variant` lets callers draw a
/// different noise realization for the same instance.
pub fn synth_features(
    narration_id: &str,
    label: (u32, u32),
    spec: &SynthSpec,
    variant: u64,
) -> Result<FeatureSequence> {
    if spec.d_model == 0 || spec.n_obs == 0 {
        return Err(Error::Shape("synthetic features need d_model >= 1 and n_obs >= 1".into()));
    }
    let d = spec.d_model;
    let anchor = class_anchor(label.0, label.1, d, spec.seed);
    let sigma = SYNTH_NOISE_SCALE / (d as f64).sqrt();
    let mut rng = seed::rng(
        spec.seed,
        &[stream::FEATURE_NOISE, seed::hash_str(narration_id), variant],
    );
    let mut token = |_: usize| -> Vec<f32> {
        anchor
            .iter()
            .map(|&a| {
                let n: f64 = rng.sample(StandardNormal);
                (sigma * n + spec.separability * a) as f32
            })
            .collect()
    };
    let observed: Vec<f32> = (0..spec.n_obs).flat_map(&mut token).collect();
    let predicted: Vec<f32> = (0..spec.n_pred).flat_map(&mut token).collect();
    FeatureSequence::new(narration_id, d, observed, predicted)
}

pub fn features_to_bytes(fs: &FeatureSequence) -> Result<Vec<u8>> {
    fs.validate()?;
    let as_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * (fs.observed.len() + fs.predicted.len()));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&as_u32(fs.d_model, "d_model")?.to_le_bytes());
    out.extend_from_slice(&as_u32(fs.n_obs, "n_obs")?.to_le_bytes());
    out.extend_from_slice(&as_u32(fs.n_pred, "n_pred")?.to_le_bytes());
    for v in fs.observed.iter().chain(&fs.predicted) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8], narration_id: &str, path: &Path) -> Result<FeatureSequence> {
    let mut r = Reader { bytes, pos: 0, path };
    let header = r
        .take(FEATURE_HEADER_LEN)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &header[..8] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, not a feature file"));
    }
    let field = |i: usize| u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (version, d_model, n_obs, n_pred) = (field(0), field(1), field(2), field(3));
    if version != FEATURE_VERSION as usize {
        return Err(Error::format(path, format!("unsupported feature version {version}")));
    }
    if d_model == 0 || n_obs == 0 {
        return Err(Error::format(
            path,
            format!("header invariant violated: d_model={d_model}, n_obs={n_obs} must be positive"),
        ));
    }
    let overflow = || Error::format(path, "dim overflow in header");
    let n_values = n_obs
        .checked_add(n_pred)
        .and_then(|n| n.checked_mul(d_model))
        .ok_or_else(overflow)?;
    let n_bytes = n_values.checked_mul(4).ok_or_else(overflow)?;
    let payload = bytes.len() - FEATURE_HEADER_LEN;
    if payload < n_bytes {
        return Err(Error::format(
            path,
            format!("truncated payload: expected {n_bytes} bytes, found {payload}"),
        ));
    }
    if payload > n_bytes {
        return Err(Error::format(
            path,
            format!("trailing data: expected {n_bytes} payload bytes, found {payload}"),
        ));
    }
    let mut values = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let observed: Vec<f32> = values.by_ref().take(n_obs * d_model).collect();
    let predicted: Vec<f32> = values.collect();
    let fs = FeatureSequence {
        narration_id: narration_id.to_string(),
        d_model,
        n_obs,
        n_pred,
        observed,
        predicted,
    };
    fs.validate().map_err(|e| e.context(path.display().to_string()))?;
    Ok(fs)
}

pub fn write_features(fs: &FeatureSequence, path: &Path) -> Result<()> {
    fs::write(path, features_to_bytes(fs)?).map_err(|e| Error::io(path, e))
}

/// The narration id is taken from the file stem.
pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(path, "file name is not a narration id"))?;
    features_from_bytes(&bytes, id, path)
}

pub fn feature_path(dir: &Path, narration_id: &str) -> PathBuf {
    dir.join(format!("{narration_id}.{FEATURE_EXT}"))
}

/// Source of backbone features for one resolved clip.
pub trait FeatureProvider: Send + Sync {
    fn d_model(&self) -> usize;
    fn fetch(&self, record: &AnnotationRecord, clip: &ClipSpec) -> Result<FeatureSequence>;
}

/// Precomputed features, one `<narration_id>.feat` file per instance. The
/// files are extracted at the evaluation gap, so the clip is not consulted.
#[derive(Debug, Clone)]
pub struct FileFeatureProvider {
    dir: PathBuf,
    d_model: usize,
}

impl FileFeatureProvider {
    pub fn new(dir: impl Into<PathBuf>, d_model: usize) -> Self {
        Self { dir: dir.into(), d_model }
    }
}

impl FeatureProvider for FileFeatureProvider {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn fetch(&self, record: &AnnotationRecord, _clip: &ClipSpec) -> Result<FeatureSequence> {
        let fs = read_features(&feature_path(&self.dir, &record.narration_id))?;
        if fs.d_model != self.d_model {
            return Err(Error::Shape(format!(
                "{}: d_model {} but the run expects {}",
                record.narration_id, fs.d_model, self.d_model
            )));
        }
        Ok(fs)
    }
}

/// Synthesizes features on demand. The noise realization depends on the clip's
/// last frame index, so perturbed training clips see different noise.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticFeatureProvider {
    pub spec: SynthSpec,
}

impl FeatureProvider for SyntheticFeatureProvider {
    fn d_model(&self) -> usize {
        self.spec.d_model
    }

    fn fetch(&self, record: &AnnotationRecord, clip: &ClipSpec) -> Result<FeatureSequence> {
        let variant = clip.frame_indices.last().copied().unwrap_or(0);
        synth_features(&record.narration_id, record.action(), &self.spec, variant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n_obs: usize, n_pred: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let obs = draw(n_obs);
        let pred = draw(n_pred);
        FeatureSequence::new("id", d, obs, pred).unwrap()
    }

    #[test]
    fn assemble_orders_observed_first() {
        let fs = FeatureSequence::new(
            "x",
            3,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        )
        .unwrap();
        let m = assemble_tokens(&fs).unwrap();
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(m.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(m.row(2), &[7.0, 8.0, 9.0]);
        assert_eq!(fs.segment_ids(), vec![0, 0, 1]);
    }

    #[test]
    fn assemble_without_predicted_is_observed() {
        let fs = seq(5, 0, 4, 1);
        let m = assemble_tokens(&fs).unwrap();
        let expected: Vec<f64> = fs.observed.iter().map(|&v| f64::from(v)).collect();
        assert_eq!(m.as_slice(), expected.as_slice());
    }

    #[test]
    fn assemble_row_index_arithmetic() {
        let fs = seq(8, 4, 16, 2);
        let m = assemble_tokens(&fs).unwrap();
        // row 9 = predicted row 9 - n_obs = 1
        for c in 0..16 {
            assert_eq!(m.get(9, c), f64::from(fs.predicted[16 + c]));
        }
    }

    #[test]
    fn mismatched_buffers_rejected() {
        assert!(FeatureSequence::new("x", 3, vec![1.0; 4], vec![]).is_err());
        assert!(FeatureSequence::new("x", 3, vec![], vec![1.0; 3]).is_err());
        assert!(FeatureSequence::new("x", 1, vec![f32::NAN], vec![]).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec::default();
        let a = synth_features("P01_1", (3, 4), &spec, 0).unwrap();
        let b = synth_features("P01_1", (3, 4), &spec, 0).unwrap();
        assert_eq!(a, b);
        let c = synth_features("P01_1", (3, 4), &spec, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_zero_separability_ignores_label() {
        let spec = SynthSpec { separability: 0.0, ..Default::default() };
        let a = synth_features("P01_1", (3, 4), &spec, 0).unwrap();
        let b = synth_features("P01_1", (7, 9), &spec, 0).unwrap();
        assert_eq!(a.observed, b.observed);
        assert_eq!(a.predicted, b.predicted);
        let c = synth_features("P01_2", (3, 4), &spec, 0).unwrap();
        assert_ne!(a.observed, c.observed);
    }

    #[test]
    fn synth_token_norm_bound() {
        let spec = SynthSpec::default();
        let bound = SYNTH_ANCHOR_NORM + 6.0 * SYNTH_NOISE_SCALE;
        for i in 0..50u32 {
            let fs = synth_features(&format!("n{i}"), (i % 7, i % 11), &spec, 0).unwrap();
            for tok in fs.observed.chunks(spec.d_model).chain(fs.predicted.chunks(spec.d_model)) {
                let norm = tok.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                assert!(norm <= bound, "norm {norm}");
            }
        }
    }

    #[test]
    fn synth_nearest_anchor_is_accurate() {
        let spec = SynthSpec { d_model: 64, separability: 1.0, seed: 11, ..Default::default() };
        let labels: Vec<(u32, u32)> = (0..200u32).map(|i| (i % 10, (i / 10) % 10)).collect();
        let mut vocab: Vec<(u32, u32)> = labels.clone();
        vocab.sort();
        vocab.dedup();
        let anchors: Vec<Vec<f64>> = vocab.iter().map(|&(v, n)| class_anchor(v, n, 64, spec.seed)).collect();
        let mut correct = 0;
        for (i, &label) in labels.iter().enumerate() {
            let fs = synth_features(&format!("x{i}"), label, &spec, 0).unwrap();
            let m = assemble_tokens(&fs).unwrap();
            let mean: Vec<f64> = m.column_sums().iter().map(|s| s / m.rows() as f64).collect();
            let best = anchors
                .iter()
                .enumerate()
                .map(|(k, a)| (k, a.iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += usize::from(vocab[best] == label);
        }
        assert!(correct as f64 / labels.len() as f64 >= 0.99, "{correct}/200");
    }

    #[test]
    fn file_round_trip_bit_exact() {
        let mut fs = seq(12, 0, 64, 3);
        fs.observed[0] = -0.0;
        fs.observed[1] = f32::from_bits(1); // smallest subnormal
        fs.observed[2] = f32::MAX;
        let bytes = features_to_bytes(&fs).unwrap();
        assert_eq!(&bytes[..8], b"JFAAFEAT");
        assert_eq!(bytes.len(), 24 + 12 * 64 * 4);
        let back = features_from_bytes(&bytes, "id", Path::new("id.feat")).unwrap();
        assert!(fs.observed.iter().zip(&back.observed).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.n_obs, 12);
        assert_eq!(back.n_pred, 0);
    }

    #[test]
    fn file_errors() {
        let fs = seq(2, 1, 4, 4);
        let bytes = features_to_bytes(&fs).unwrap();
        let p = Path::new("x.feat");
        let err = features_from_bytes(&bytes[..bytes.len() - 4], "x", p).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(features_from_bytes(&bad, "x", p).unwrap_err().to_string().contains("magic"));

        let mut zero_obs = bytes.clone();
        zero_obs[16..20].copy_from_slice(&0u32.to_le_bytes());
        assert!(features_from_bytes(&zero_obs, "x", p).unwrap_err().to_string().contains("n_obs"));

        let mut huge = bytes.clone();
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(features_from_bytes(&huge, "x", p).is_err());

        assert!(features_from_bytes(&bytes[..10], "x", p).is_err());
    }

    #[test]
    fn write_read_via_disk() {
        let dir = tempfile::tempdir().unwrap();
        let fs = FeatureSequence { narration_id: "P01_7".into(), ..seq(3, 2, 8, 5) };
        let path = feature_path(dir.path(), "P01_7");
        write_features(&fs, &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), fs);
    }
}
