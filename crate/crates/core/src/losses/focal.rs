use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::LogitTriple;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalConfig {
    /// Positive-class weight; `None` weights both branches by 1. Written as
    /// `"none"` in config files.
    #[serde(with = "alpha_repr")]
    pub alpha: Option<f64>,
    pub gamma: f64,
    /// Verb, noun, action.
    pub field_weights: [f64; 3],
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: Some(0.25),
            gamma: 2.0,
            field_weights: [1.0, 1.0, 1.0],
        }
    }
}

mod alpha_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(a: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match a {
            Some(v) => s.serialize_f64(*v),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(Some(v)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("alpha must be a number or \"none\", got {w:?}"))),
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("focal alpha {a} not in [0, 1]")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        if self.field_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("field weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and d/dx of one binary focal term with the target on (`positive`)
/// or off.
fn focal_term(x: f64, positive: bool, alpha: Option<f64>, gamma: f64) -> (f64, f64) {
    // Mirror negatives onto positives: a negative at x behaves like a positive at -x.
    let (y, sign) = if positive { (x, 1.0) } else { (-x, -1.0) };
    let weight = match (alpha, positive) {
        (None, _) => 1.0,
        (Some(a), true) => a,
        (Some(a), false) => 1.0 - a,
    };
    let p = sigmoid(y);
    let q = sigmoid(-y); // 1 - p without cancellation
    let log_p = -softplus(-y);
    let modulator = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -weight * modulator * log_p;
    // dL/dy = w (1-p)^g [g p log p - (1 - p)]
    let dy = weight * modulator * (gamma * p * log_p - q);
    (loss, sign * dy)
}

/// Sigmoid focal loss over a one-hot target, averaged over classes.
pub fn sigmoid_focal_loss(logits: &[f64], target: usize, cfg: &FocalConfig) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Shape(format!(
            "target class {target} outside {} logits",
            logits.len()
        )));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("focal loss logits".into()));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (j, &x) in logits.iter().enumerate() {
        let (l, g) = focal_term(x, j == target, cfg.alpha, cfg.gamma);
        total += l;
        grad.push(g / n);
    }
    Ok((total / n, grad))
}

/// Training labels as indices into the probe's class vocabularies. The
/// action is `None` when the pair is not in the training pair vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldLabels {
    pub verb: usize,
    pub noun: usize,
    pub action: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub fields: [f64; 3],
}

pub fn total_loss(
    logits: &LogitTriple,
    labels: FieldLabels,
    cfg: &FocalConfig,
) -> Result<(LossBreakdown, LogitTriple)> {
    let mut grads = LogitTriple {
        verb: vec![0.0; logits.verb.len()],
        noun: vec![0.0; logits.noun.len()],
        action: vec![0.0; logits.action.len()],
    };
    let mut fields = [0.0; 3];
    let targets = [Some(labels.verb), Some(labels.noun), labels.action];
    for f in 0..3 {
        let Some(t) = targets[f] else { continue };
        let w = cfg.field_weights[f];
        let (l, mut g) = sigmoid_focal_loss(logits.field(f), t, cfg)?;
        fields[f] = l;
        g.iter_mut().for_each(|v| *v *= w);
        *grads.field_mut(f) = g;
    }
    let total = fields.iter().zip(&cfg.field_weights).map(|(l, w)| l * w).sum();
    Ok((LossBreakdown { total, fields }, grads))
}
