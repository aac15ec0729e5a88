use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autoconfig::PlanConfig;
use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::{CascadeModel, Codebook, NetConfig, SynergyUNet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    /// Little-endian f32, base64.
    pub data: String,
}

impl StoredTensor {
    fn pack(t: &Tensor<f32>) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        StoredTensor {
            shape: t.shape().to_vec(),
            data: B64.encode(bytes),
        }
    }

    fn unpack(&self, what: &str) -> Result<Tensor<f32>> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("{what}: bad base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("{what}: truncated blob")));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(&self.shape, data).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredCodebook {
    pub embeddings: StoredTensor,
    pub usage_ema: Vec<f64>,
    pub decay: f64,
}

/// Versioned model container. A single network is stored under the role
/// `net`; a cascade under `lowres` and `fullres`. Parameter names are
/// `<role>.<canonical name>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub plan: PlanConfig,
    pub networks: BTreeMap<String, NetConfig>,
    pub params: BTreeMap<String, StoredTensor>,
    pub codebooks: BTreeMap<String, StoredCodebook>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowres_scale: Option<[usize; 3]>,
    pub epoch: usize,
    pub best_val_dice: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub enum CheckpointModel {
    Single(SynergyUNet<f32>),
    Cascade(CascadeModel<f32>),
}

impl Checkpoint {
    pub fn from_model(model: &CheckpointModel, plan: &PlanConfig, epoch: usize, best_val_dice: f64) -> Self {
        let mut ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            plan: plan.clone(),
            networks: BTreeMap::new(),
            params: BTreeMap::new(),
            codebooks: BTreeMap::new(),
            lowres_scale: None,
            epoch,
            best_val_dice,
            provenance: None,
        };
        match model {
            CheckpointModel::Single(net) => ck.store("net", net),
            CheckpointModel::Cascade(c) => {
                ck.store("lowres", &c.lowres);
                ck.store("fullres", &c.fullres);
                ck.lowres_scale = Some(c.lowres_scale);
            }
        }
        ck
    }

    fn store(&mut self, role: &str, net: &SynergyUNet<f32>) {
        self.networks.insert(role.into(), net.config.clone());
        for p in net.params.iter() {
            self.params.insert(format!("{role}.{}", p.name), StoredTensor::pack(&p.value));
        }
        self.codebooks.insert(
            role.into(),
            StoredCodebook {
                embeddings: StoredTensor::pack(&net.codebook.embeddings),
                usage_ema: net.codebook.usage_ema.clone(),
                decay: net.codebook.decay,
            },
        );
    }

    fn restore(&self, role: &str) -> Result<SynergyUNet<f32>> {
        let cfg = self
            .networks
            .get(role)
            .ok_or_else(|| Error::Checkpoint(format!("no network stored under '{role}'")))?;
        let mut net = SynergyUNet::<f32>::new(cfg.clone(), 0)?;
        for id in net.params.ids().collect::<Vec<_>>() {
            let key = format!("{role}.{}", net.params.name(id));
            let stored = self
                .params
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {key}")))?;
            let t = stored.unpack(&key)?;
            if t.shape() != net.params.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: stored shape {:?}, network expects {:?}",
                    t.shape(),
                    net.params.get(id).shape()
                )));
            }
            *net.params.get_mut(id) = t;
        }
        let cb = self
            .codebooks
            .get(role)
            .ok_or_else(|| Error::Checkpoint(format!("missing codebook for '{role}'")))?;
        let mut book = Codebook::new(cb.embeddings.unpack("codebook")?, cb.decay)?;
        if cb.usage_ema.len() != book.size() {
            return Err(Error::Checkpoint("codebook usage length differs from K".into()));
        }
        book.usage_ema = cb.usage_ema.clone();
        if book.embeddings.shape() != net.codebook.embeddings.shape() {
            return Err(Error::Checkpoint("codebook shape differs from network config".into()));
        }
        net.codebook = book;
        Ok(net)
    }

    pub fn model(&self) -> Result<CheckpointModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let model = if let Some(scale) = self.lowres_scale {
            CheckpointModel::Cascade(CascadeModel::new(self.restore("lowres")?, self.restore("fullres")?, scale)?)
        } else {
            CheckpointModel::Single(self.restore("net")?)
        };
        let used: usize = match &model {
            CheckpointModel::Single(n) => n.params.len(),
            CheckpointModel::Cascade(c) => c.lowres.params.len() + c.fullres.params.len(),
        };
        if used != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, network uses {used}",
                self.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }
}
