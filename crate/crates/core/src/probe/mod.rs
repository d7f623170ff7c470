//! Attentive probe over frozen feature tokens.
//!
//! Tokens (plus a learned observed/predicted segment embedding) pass through
//! pre-norm transformer blocks, are normalized, and are then pooled by one
//! multi-head cross-attention in which three learned task queries (verb, noun,
//! action) attend over all tokens. Each pooled vector feeds its own affine
//! classifier. Keys and values of the pooling attention are shared across the
//! three queries.

mod checkpoint;
pub mod gradcheck;
mod model;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};
use crate::tensor::Matrix;
use crate::windows::{N_NOUN_CLASSES, N_VERB_CLASSES};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use model::{attentive_pool, probe_backward, probe_forward, Tape};

pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub n_verb: usize,
    pub n_noun: usize,
    pub n_action: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_blocks: 4,
            n_heads: 16,
            mlp_ratio: 4.0,
            n_verb: N_VERB_CLASSES,
            n_noun: N_NOUN_CLASSES,
            n_action: 1,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(Error::Config(format!("invalid mlp_ratio {}", self.mlp_ratio)));
        }
        if self.n_verb == 0 || self.n_noun == 0 || self.n_action == 0 {
            return Err(Error::Config("class counts must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }

    pub fn n_classes(&self, field: usize) -> usize {
        [self.n_verb, self.n_noun, self.n_action][field]
    }
}

/// Verb / noun / action, in that order wherever a triple is indexed.
pub const FIELD_NAMES: [&str; 3] = ["verb", "noun", "action"];

#[derive(Debug, Clone, PartialEq)]
pub struct LogitTriple {
    pub verb: Vec<f64>,
    pub noun: Vec<f64>,
    pub action: Vec<f64>,
}

impl LogitTriple {
    pub fn zeros(cfg: &ProbeConfig) -> Self {
        Self {
            verb: vec![0.0; cfg.n_verb],
            noun: vec![0.0; cfg.n_noun],
            action: vec![0.0; cfg.n_action],
        }
    }

    pub fn field(&self, i: usize) -> &[f64] {
        match i {
            0 => &self.verb,
            1 => &self.noun,
            _ => &self.action,
        }
    }

    pub fn field_mut(&mut self, i: usize) -> &mut Vec<f64> {
        match i {
            0 => &mut self.verb,
            1 => &mut self.noun,
            _ => &mut self.action,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.verb.iter().chain(&self.noun).chain(&self.action).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIdx {
    pub norm1_gain: usize,
    pub norm1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub norm2_gain: usize,
    pub norm2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct PoolIdx {
    pub norm_gain: usize,
    pub norm_bias: usize,
    pub queries: [usize; 3],
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Linear { fan_in: usize },
    Ones,
    Zeros,
    SmallGaussian,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
    pub segment: usize,
    pub blocks: Vec<BlockIdx>,
    pub pool: PoolIdx,
    pub cls_w: [usize; 3],
    pub cls_b: [usize; 3],
}

impl Layout {
    fn new(cfg: &ProbeConfig) -> Self {
        let d = cfg.d_model;
        let hid = cfg.hidden_dim();
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut inits = Vec::new();
        let mut add = |name: String, r: usize, c: usize, init: Init| {
            names.push(name);
            shapes.push((r, c));
            inits.push(init);
            names.len() - 1
        };

        let segment = add("segment_embed".into(), 2, d, Init::SmallGaussian);
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                let p = |s: &str| format!("blocks.{b}.{s}");
                BlockIdx {
                    norm1_gain: add(p("norm1.gain"), 1, d, Init::Ones),
                    norm1_bias: add(p("norm1.bias"), 1, d, Init::Zeros),
                    wq: add(p("attn.wq"), d, d, Init::Linear { fan_in: d }),
                    bq: add(p("attn.bq"), 1, d, Init::Zeros),
                    wk: add(p("attn.wk"), d, d, Init::Linear { fan_in: d }),
                    bk: add(p("attn.bk"), 1, d, Init::Zeros),
                    wv: add(p("attn.wv"), d, d, Init::Linear { fan_in: d }),
                    bv: add(p("attn.bv"), 1, d, Init::Zeros),
                    wo: add(p("attn.wo"), d, d, Init::Linear { fan_in: d }),
                    bo: add(p("attn.bo"), 1, d, Init::Zeros),
                    norm2_gain: add(p("norm2.gain"), 1, d, Init::Ones),
                    norm2_bias: add(p("norm2.bias"), 1, d, Init::Zeros),
                    w1: add(p("mlp.w1"), d, hid, Init::Linear { fan_in: d }),
                    b1: add(p("mlp.b1"), 1, hid, Init::Zeros),
                    w2: add(p("mlp.w2"), hid, d, Init::Linear { fan_in: hid }),
                    b2: add(p("mlp.b2"), 1, d, Init::Zeros),
                }
            })
            .collect();
        let pool = PoolIdx {
            norm_gain: add("pool.norm.gain".into(), 1, d, Init::Ones),
            norm_bias: add("pool.norm.bias".into(), 1, d, Init::Zeros),
            queries: [
                add("pool.query_verb".into(), 1, d, Init::SmallGaussian),
                add("pool.query_noun".into(), 1, d, Init::SmallGaussian),
                add("pool.query_action".into(), 1, d, Init::SmallGaussian),
            ],
            wq: add("pool.attn.wq".into(), d, d, Init::Linear { fan_in: d }),
            bq: add("pool.attn.bq".into(), 1, d, Init::Zeros),
            wk: add("pool.attn.wk".into(), d, d, Init::Linear { fan_in: d }),
            bk: add("pool.attn.bk".into(), 1, d, Init::Zeros),
            wv: add("pool.attn.wv".into(), d, d, Init::Linear { fan_in: d }),
            bv: add("pool.attn.bv".into(), 1, d, Init::Zeros),
            wo: add("pool.attn.wo".into(), d, d, Init::Linear { fan_in: d }),
            bo: add("pool.attn.bo".into(), 1, d, Init::Zeros),
        };
        let mut cls_w = [0; 3];
        let mut cls_b = [0; 3];
        for (f, name) in FIELD_NAMES.iter().enumerate() {
            let c = cfg.n_classes(f);
            cls_w[f] = add(format!("classifier.{name}.weight"), d, c, Init::Linear { fan_in: d });
            cls_b[f] = add(format!("classifier.{name}.bias"), 1, c, Init::Zeros);
        }
        Self { names, shapes, inits, segment, blocks, pool, cls_w, cls_b }
    }
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// All learnable tensors of one probe head, addressed by stable names.
///
/// Every mutable access bumps `generation`; tapes remember the identity and
/// generation they were recorded against so stale tapes are refused.
#[derive(Debug)]
pub struct ProbeParameters {
    cfg: ProbeConfig,
    pub(crate) layout: Layout,
    pub(crate) tensors: Vec<Matrix>,
    uid: u64,
    generation: u64,
}

impl Clone for ProbeParameters {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.clone(),
            uid: next_uid(),
            generation: 0,
        }
    }
}

impl PartialEq for ProbeParameters {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.tensors == other.tensors
    }
}

/// Same indexing as the parameters they were produced for.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGradients {
    pub tensors: Vec<Matrix>,
}

impl ProbeGradients {
    pub fn zeros_like(params: &ProbeParameters) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ProbeGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.as_slice().iter().all(|&v| v == 0.0))
    }
}

pub fn init_params(cfg: &ProbeConfig) -> Result<ProbeParameters> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = seed::rng(cfg.seed, &[stream::PROBE_INIT]);
    let tensors = layout
        .shapes
        .iter()
        .zip(&layout.inits)
        .map(|(&(r, c), &init)| {
            let mut m = Matrix::zeros(r, c);
            match init {
                Init::Zeros => {}
                Init::Ones => m.fill(1.0),
                Init::Linear { fan_in } => {
                    let s = 1.0 / (fan_in as f64).sqrt();
                    m.as_mut_slice().iter_mut().for_each(|v| *v = s * rng.sample::<f64, _>(StandardNormal));
                }
                Init::SmallGaussian => {
                    m.as_mut_slice()
                        .iter_mut()
                        .for_each(|v| *v = QUERY_INIT_STD * rng.sample::<f64, _>(StandardNormal));
                }
            }
            m
        })
        .collect();
    Ok(ProbeParameters { cfg: cfg.clone(), layout, tensors, uid: next_uid(), generation: 0 })
}

impl ProbeParameters {
    pub fn config(&self) -> &ProbeConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.names.iter().position(|n| n == name)
    }

    pub fn tensor(&self, i: usize) -> &Matrix {
        &self.tensors[i]
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Matrix {
        self.generation += 1;
        &mut self.tensors[i]
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let i = self.index_of(name)?;
        Some(self.tensor_mut(i))
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }

    pub(crate) fn stamp(&self) -> (u64, u64) {
        (self.uid, self.generation)
    }

    /// Replaces every tensor; shapes must match the layout.
    pub fn load_tensors(&mut self, tensors: Vec<Matrix>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (new, old)) in tensors.iter().zip(&self.tensors).enumerate() {
            if new.shape() != old.shape() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, got {:?}",
                    self.layout.names[i],
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = tensors;
        self.generation += 1;
        Ok(())
    }
}
