//! Self-describing model files.
//!
//! Layout:
//!
//! ```text
//! CHDQR-CHECKPOINT 1\n
//! u64 little-endian: header length in bytes
//! header: UTF-8 JSON (CheckpointHeader)
//! payload: little-endian f64 values, tensors back to back in manifest order
//! ```
//!
//! Every tensor is listed in the header manifest with its shape and
//! offset (in f64 units) into the payload. Matrices are row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::CqrModel;
use crate::config::Method;
use crate::conformal::DensityModel;
use crate::data::{write_atomic, Standardizer};
use crate::density::DensityNetwork;
use crate::error::{Error, Result};
use crate::geometry::{AreaVector, BoundingBox};
use crate::matrix::Matrix;
use crate::nn::{Architecture, Layer, Mlp};
use crate::pipeline::{Calibration, TrainedModel};
use crate::quantizer::PrototypeSet;

pub const MAGIC: &[u8] = b"CHDQR-CHECKPOINT 1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub method: Method,
    pub config_hash: String,
    pub crate_version: String,
    pub architecture: Architecture,
    pub scaler: Standardizer,
    pub target_std: Vec<f64>,
    /// Density methods only.
    pub bbox: Option<BoundingBox>,
    pub k: Option<usize>,
    pub learnable: Option<bool>,
    /// CQR only.
    pub alpha: Option<f64>,
    pub target_scaler: Option<Standardizer>,
    pub crossing_rate: Option<f64>,
    pub manifest: Vec<TensorEntry>,
    pub payload_len: usize,
}

struct Payload {
    manifest: Vec<TensorEntry>,
    values: Vec<f64>,
}

impl Payload {
    fn new() -> Self {
        Self {
            manifest: Vec::new(),
            values: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        self.manifest.push(TensorEntry {
            name: name.into(),
            shape,
            offset: self.values.len(),
        });
        self.values.extend_from_slice(data);
    }

    fn push_mlp(&mut self, mlp: &Mlp) {
        for (i, layer) in mlp.layers().iter().enumerate() {
            self.push(
                format!("layer{i}.weight"),
                vec![layer.outputs(), layer.inputs()],
                layer.weights.as_slice(),
            );
            self.push(format!("layer{i}.bias"), vec![layer.outputs()], &layer.bias);
        }
    }
}

fn tensor<'a>(header: &CheckpointHeader, values: &'a [f64], name: &str) -> Result<(&'a [f64], Vec<usize>)> {
    let e = header
        .manifest
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor '{name}'")))?;
    let len: usize = e.shape.iter().product();
    let end = e.offset.checked_add(len).filter(|end| *end <= values.len());
    match end {
        Some(end) => Ok((&values[e.offset..end], e.shape.clone())),
        None => Err(Error::Data(format!("tensor '{name}' runs past the payload"))),
    }
}

fn read_mlp(header: &CheckpointHeader, values: &[f64]) -> Result<Mlp> {
    let n_layers = header.architecture.hidden.len() + 1;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let (w, shape) = tensor(header, values, &format!("layer{i}.weight"))?;
        if shape.len() != 2 {
            return Err(Error::Data(format!("layer{i}.weight must be a matrix")));
        }
        let (b, _) = tensor(header, values, &format!("layer{i}.bias"))?;
        layers.push(Layer {
            weights: Matrix::from_vec(shape[0], shape[1], w.to_vec())?,
            bias: b.to_vec(),
        });
    }
    let mlp = Mlp::from_layers(layers)?;
    if mlp.architecture() != header.architecture {
        return Err(Error::Data("checkpoint tensors disagree with the architecture".into()));
    }
    Ok(mlp)
}

pub fn to_bytes(model: &TrainedModel, config_hash: &str) -> Result<Vec<u8>> {
    let mut payload = Payload::new();
    let header = match model {
        TrainedModel::Density {
            method,
            model,
            target_std,
            ..
        } => {
            let mlp = model.net.mlp();
            payload.push_mlp(mlp);
            let c = model.protos.coords();
            payload.push("prototypes", vec![c.rows(), c.cols()], c.as_slice());
            payload.push("areas", vec![model.areas.len()], model.areas.as_slice());
            CheckpointHeader {
                method: *method,
                config_hash: config_hash.into(),
                crate_version: env!("CARGO_PKG_VERSION").into(),
                architecture: mlp.architecture(),
                scaler: model.scaler.clone(),
                target_std: target_std.clone(),
                bbox: Some(model.protos.bbox().clone()),
                k: Some(model.k()),
                learnable: Some(model.protos.is_learnable()),
                alpha: None,
                target_scaler: None,
                crossing_rate: None,
                manifest: Vec::new(),
                payload_len: 0,
            }
        }
        TrainedModel::Cqr(m) => {
            payload.push_mlp(&m.net);
            CheckpointHeader {
                method: Method::Cqr,
                config_hash: config_hash.into(),
                crate_version: env!("CARGO_PKG_VERSION").into(),
                architecture: m.net.architecture(),
                scaler: m.scaler.clone(),
                target_std: m.target_scaler.std.clone(),
                bbox: None,
                k: None,
                learnable: None,
                alpha: Some(m.alpha),
                target_scaler: Some(m.target_scaler.clone()),
                crossing_rate: Some(m.crossing_rate),
                manifest: Vec::new(),
                payload_len: 0,
            }
        }
    };
    let header = CheckpointHeader {
        manifest: payload.manifest,
        payload_len: payload.values.len(),
        ..header
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * payload.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &payload.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TrainedModel, CheckpointHeader)> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Data("not a checkpoint file (bad magic line)".into()))?;
    if rest.len() < 8 {
        return Err(Error::Data("checkpoint truncated before header length".into()));
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(Error::Data("checkpoint truncated inside header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let body = &rest[header_len..];
    if body.len() != 8 * header.payload_len {
        return Err(Error::Data(format!(
            "checkpoint payload holds {} bytes, header promises {}",
            body.len(),
            8 * header.payload_len
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mlp = read_mlp(&header, &values)?;
    let model = match header.method {
        Method::Cqr => TrainedModel::Cqr(CqrModel {
            net: mlp,
            alpha: header
                .alpha
                .ok_or_else(|| Error::Data("quantile checkpoint lacks alpha".into()))?,
            scaler: header.scaler.clone(),
            target_scaler: header
                .target_scaler
                .clone()
                .ok_or_else(|| Error::Data("quantile checkpoint lacks target scaler".into()))?,
            crossing_rate: header.crossing_rate.unwrap_or(0.0),
        }),
        method => {
            let bbox = header
                .bbox
                .clone()
                .ok_or_else(|| Error::Data("density checkpoint lacks a bounding box".into()))?;
            let (c, shape) = tensor(&header, &values, "prototypes")?;
            let coords = Matrix::from_vec(shape[0], shape[1], c.to_vec())?;
            let volume = bbox.volume();
            let mut protos = PrototypeSet::new(coords, bbox)?;
            if header.learnable == Some(false) {
                protos = protos.frozen();
            }
            let (a, _) = tensor(&header, &values, "areas")?;
            let areas = AreaVector::new(a.to_vec(), volume)?;
            TrainedModel::Density {
                method,
                model: DensityModel::new(
                    DensityNetwork::from_mlp(mlp),
                    protos,
                    areas,
                    header.scaler.clone(),
                )?,
                target_std: header.target_std.clone(),
                history: Vec::new(),
            }
        }
    };
    Ok((model, header))
}

pub fn save(path: &Path, model: &TrainedModel, config_hash: &str) -> Result<()> {
    write_atomic(path, &to_bytes(model, config_hash)?)
}

pub fn load(path: &Path) -> Result<(TrainedModel, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}

pub fn save_calibration(path: &Path, cal: &Calibration) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(cal)?.as_bytes())
}

pub fn load_calibration(path: &Path) -> Result<Calibration> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
