//! Probe checkpoints: a config echo in the container metadata plus one named
//! f64 tensor per parameter, in layout order.
//!
//! Parameter names (stable): `segment_embed`, `blocks.{b}.norm1.{gain,bias}`,
//! `blocks.{b}.attn.{wq,bq,wk,bk,wv,bv,wo,bo}`, `blocks.{b}.norm2.{gain,bias}`,
//! `blocks.{b}.mlp.{w1,b1,w2,b2}`, `pool.norm.{gain,bias}`,
//! `pool.query_{verb,noun,action}`, `pool.attn.{wq,bq,wk,bk,wv,bv,wo,bo}`,
//! `classifier.{verb,noun,action}.{weight,bias}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ProbeConfig, ProbeParameters};
use crate::container::{Container, NamedTensor, TensorData};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const FORMAT_TAG: &str = "jfaa-probe-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub head_id: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    probe: ProbeConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub fn save_checkpoint(params: &ProbeParameters, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        probe: params.config().clone(),
        meta: meta.clone(),
    };
    let tensors = params
        .names()
        .iter()
        .zip(params.tensors())
        .map(|(name, t)| NamedTensor::f64(name.clone(), t.rows(), t.cols(), t.as_slice().to_vec()))
        .collect();
    let container = Container {
        meta: serde_json::to_string(&header).expect("checkpoint header serializes"),
        tensors,
    };
    container.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ProbeParameters, CheckpointMeta)> {
    let container = Container::read(path)?;
    let header: Header = serde_json::from_str(&container.meta)
        .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::format(path, format!("not a probe checkpoint: {}", header.format)));
    }
    let mut params = init_params(&header.probe)?;
    let mut tensors = Vec::with_capacity(params.len());
    for name in params.names() {
        let t = container
            .get(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
        let TensorData::F64(data) = &t.data else {
            return Err(Error::format(path, format!("tensor {name} is not f64")));
        };
        tensors.push(Matrix::from_vec(t.rows, t.cols, data.clone())?);
    }
    if container.tensors.len() != tensors.len() {
        return Err(Error::format(path, "checkpoint holds unexpected extra tensors"));
    }
    params
        .load_tensors(tensors)
        .map_err(|e| e.context(path.display().to_string()))?;
    Ok((params, header.meta))
}
