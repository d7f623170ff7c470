//! Central finite-difference check of the probe's analytic gradients.
//!
//! The numerical side only ever calls the forward pass, so it stays
//! independent of the backward implementation it verifies.

use rand::Rng;
use serde::Serialize;

use super::{init_params, probe_backward, probe_forward, ProbeConfig, ProbeParameters};
use crate::error::Result;
use crate::losses::{total_loss, FieldLabels, FocalConfig};
use crate::seed;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub probe: ProbeConfig,
    pub n_tokens: usize,
    pub n_observed: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; tensors at most this large are checked fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig {
                d_model: 32,
                n_blocks: 2,
                n_heads: 4,
                mlp_ratio: 4.0,
                n_verb: 7,
                n_noun: 9,
                n_action: 5,
                seed: 0,
            },
            n_tokens: 6,
            n_observed: 4,
            step: 1e-3,
            tolerance: 1e-4,
            samples_per_tensor: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Gradients smaller than this (in norm) are compared absolutely.
const ABS_FLOOR: f64 = 1e-10;

fn scalar_loss(
    tokens: &Matrix,
    segments: &[u8],
    params: &ProbeParameters,
    labels: FieldLabels,
    focal: &FocalConfig,
) -> Result<f64> {
    let (logits, _) = probe_forward(tokens, segments, params)?;
    Ok(total_loss(&logits, labels, focal)?.0.total)
}

pub fn check_probe_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = seed::rng(cfg.seed, &[0x6772_6164]);
    let params = init_params(&cfg.probe)?;
    let d = cfg.probe.d_model;
    let tokens = Matrix::from_vec(
        cfg.n_tokens,
        d,
        (0..cfg.n_tokens * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let segments: Vec<u8> = (0..cfg.n_tokens).map(|i| u8::from(i >= cfg.n_observed)).collect();
    let labels = FieldLabels {
        verb: rng.random_range(0..cfg.probe.n_verb),
        noun: rng.random_range(0..cfg.probe.n_noun),
        action: Some(rng.random_range(0..cfg.probe.n_action)),
    };
    let focal = FocalConfig::default();

    let (logits, tape) = probe_forward(&tokens, &segments, &params)?;
    let (_, dlogits) = total_loss(&logits, labels, &focal)?;
    let grads = probe_backward(&tape, &dlogits, &params)?;

    let mut probe = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for ti in 0..params.len() {
        let n = params.tensor(ti).len();
        let coords: Vec<usize> = if n <= cfg.samples_per_tensor {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let mut err2 = 0.0;
        let mut an2 = 0.0;
        let mut num2 = 0.0;
        for &c in &coords {
            let orig = params.tensor(ti).as_slice()[c];
            probe.tensor_mut(ti).as_mut_slice()[c] = orig + cfg.step;
            let up = scalar_loss(&tokens, &segments, &probe, labels, &focal)?;
            probe.tensor_mut(ti).as_mut_slice()[c] = orig - cfg.step;
            let down = scalar_loss(&tokens, &segments, &probe, labels, &focal)?;
            probe.tensor_mut(ti).as_mut_slice()[c] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let analytic = grads.tensors[ti].as_slice()[c];
            err2 += (numeric - analytic).powi(2);
            an2 += analytic.powi(2);
            num2 += numeric.powi(2);
        }
        let scale = an2.sqrt().max(num2.sqrt());
        let err = err2.sqrt();
        let (rel_error, passed) = if scale < ABS_FLOOR {
            (err, err < ABS_FLOOR)
        } else {
            (err / scale, err / scale <= cfg.tolerance)
        };
        checks.push(TensorCheck {
            name: params.names()[ti].clone(),
            coordinates: coords.len(),
            analytic_norm: an2.sqrt(),
            rel_error,
            passed,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport { tensors: checks, max_rel_error, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_probe_passes() {
        let cfg = GradCheckConfig {
            probe: ProbeConfig { d_model: 8, n_blocks: 1, n_heads: 2, mlp_ratio: 2.0, n_verb: 3, n_noun: 4, n_action: 2, seed: 3 },
            n_tokens: 3,
            n_observed: 2,
            ..Default::default()
        };
        let report = check_probe_gradients(&cfg).unwrap();
        for t in &report.tensors {
            assert!(t.passed, "{} rel {}", t.name, t.rel_error);
        }
    }
}
