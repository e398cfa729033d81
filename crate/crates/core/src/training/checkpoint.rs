//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, a JSON header,
//! then every array's values as raw `f64` little-endian, in header order.
//! The header records the configs, their hash, epoch, monitored metric, the
//! training RNG position, and `(name, role, shape, offset)` for each array.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamState, Moments};
use super::OptimConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{fnv1a, StreamState};
use crate::sequence_model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"TKCKPT\x00\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub optim_cfg: OptimConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Validation value of the monitored metric, once one was computed.
    pub metric: Option<f64>,
    /// Best monitored value so far and epochs since it improved.
    pub best_metric: Option<f64>,
    pub wait: usize,
    pub rng: StreamState,
    pub params: ParamSet,
    pub adam: AdamState,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Role {
    Param,
    FrozenParam,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    epoch: usize,
    metric: Option<f64>,
    best_metric: Option<f64>,
    wait: usize,
    adam_step: u64,
    rng: StreamState,
    model: ModelConfig,
    optim: OptimConfig,
    arrays: Vec<ArrayEntry>,
}

/// Hex FNV-1a of the canonical JSON of both configs.
pub fn config_hash(model: &ModelConfig, optim: &OptimConfig) -> String {
    let json = serde_json::to_string(&(model, optim)).expect("configs serialize");
    format!("{:016x}", fnv1a(json.as_bytes()))
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.model_cfg, &self.optim_cfg)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.model_cfg.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: &str,
                        role: Role,
                        shape: Vec<usize>,
                        data: &[f64],
                        arrays: &mut Vec<ArrayEntry>| {
            arrays.push(ArrayEntry {
                name: name.to_string(),
                role,
                shape,
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        for p in self.params.iter() {
            let role = if p.trainable {
                Role::Param
            } else {
                Role::FrozenParam
            };
            push(
                &p.name,
                role,
                p.value.shape().to_vec(),
                p.value.data(),
                &mut arrays,
            );
        }
        for mo in &self.adam.moments {
            push(&mo.name, Role::AdamM, vec![mo.m.len()], &mo.m, &mut arrays);
            push(&mo.name, Role::AdamV, vec![mo.v.len()], &mo.v, &mut arrays);
        }
        let header = Header {
            config_hash: self.config_hash(),
            epoch: self.epoch,
            metric: self.metric,
            best_metric: self.best_metric,
            wait: self.wait,
            adam_step: self.adam.step,
            rng: self.rng,
            model: self.model_cfg.clone(),
            optim: self.optim_cfg.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header).map_err(|e| ck(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ck("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| ck("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| ck(format!("bad header: {e}")))?;
        if header.config_hash != config_hash(&header.model, &header.optim) {
            return Err(ck("config hash does not match the stored configs"));
        }
        let raw = &bytes[16 + hlen..];
        if !raw.len().is_multiple_of(8) {
            return Err(ck("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut params = ParamSet::new();
        let mut moments: Vec<Moments> = Vec::new();
        let mut expected_end = 0;
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            if a.offset != expected_end {
                return Err(ck(format!("array {} is not contiguous", a.name)));
            }
            expected_end = a.offset + n;
            let data = values
                .get(a.offset..a.offset + n)
                .ok_or_else(|| ck(format!("array {} runs past the payload", a.name)))?
                .to_vec();
            match a.role {
                Role::Param | Role::FrozenParam => {
                    let t = Tensor::new(a.shape.clone(), data).map_err(|e| ck(e.to_string()))?;
                    params.insert(a.name.clone(), t, matches!(a.role, Role::Param));
                }
                Role::AdamM => moments.push(Moments {
                    name: a.name.clone(),
                    m: data,
                    v: Vec::new(),
                }),
                Role::AdamV => {
                    let slot = moments
                        .iter_mut()
                        .find(|m| m.name == a.name && m.v.is_empty())
                        .ok_or_else(|| {
                            ck(format!("second moment for {} without a first", a.name))
                        })?;
                    if slot.m.len() != data.len() {
                        return Err(ck(format!("moment lengths differ for {}", a.name)));
                    }
                    slot.v = data;
                }
            }
        }
        if expected_end != values.len() {
            return Err(ck("payload has trailing values"));
        }
        let ckpt = Checkpoint {
            model_cfg: header.model,
            optim_cfg: header.optim,
            epoch: header.epoch,
            metric: header.metric,
            best_metric: header.best_metric,
            wait: header.wait,
            rng: header.rng,
            params,
            adam: AdamState {
                step: header.adam_step,
                moments,
            },
        };
        // shapes must agree with the stored model config
        ckpt.model()?;
        Ok(ckpt)
    }

    /// Writes through a temporary file and a rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and checks that the stored model config equals `expected`.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let c = Self::load(path)?;
        if &c.model_cfg != expected {
            return Err(Error::Checkpoint(format!(
                "{}: checkpoint was written for a different model config",
                path.display()
            )));
        }
        Ok(c)
    }
}
