//! JSON parameter checkpoints.
//!
//! ```json
//! { "format": "cavg-checkpoint", "version": 1,
//!   "architecture": { ... },
//!   "actor": [ { "name": "actor.encoder.weight", "shape": [6, 64], "values": [...] }, ... ],
//!   "critic": [ ... ] }
//! ```
//!
//! Values are written in shortest round-trip form, so loading reproduces
//! every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::ParamStore;
use super::policy::{Architecture, Policy};
use super::NnError;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "cavg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub actor: Vec<NamedTensor>,
    pub critic: Vec<NamedTensor>,
}

fn export(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .params()
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            shape: [p.value.rows(), p.value.cols()],
            values: p.value.data().to_vec(),
        })
        .collect()
}

fn import(store: &mut ParamStore, saved: &[NamedTensor]) -> Result<(), NnError> {
    if saved.len() != store.len() {
        return Err(NnError::IncompatibleCheckpoint(format!(
            "expected {} tensors, found {}",
            store.len(),
            saved.len()
        )));
    }
    for (p, s) in store.params_mut().iter_mut().zip(saved) {
        if p.name != s.name {
            return Err(NnError::IncompatibleCheckpoint(format!(
                "expected tensor {}, found {}",
                p.name, s.name
            )));
        }
        if [p.value.rows(), p.value.cols()] != s.shape || s.values.len() != s.shape[0] * s.shape[1] {
            return Err(NnError::IncompatibleCheckpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                s.name,
                s.shape,
                p.value.shape()
            )));
        }
        p.value = Tensor::from_vec(s.shape[0], s.shape[1], s.values.clone());
        if !p.value.is_finite() {
            return Err(NnError::IncompatibleCheckpoint(format!("tensor {} is not finite", s.name)));
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: policy.arch,
            actor: export(&policy.actor),
            critic: export(&policy.critic),
        }
    }

    /// Rebuild the policy, requiring `expected` architecture when given.
    pub fn into_policy(self, expected: Option<&Architecture>) -> Result<Policy, NnError> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(NnError::IncompatibleCheckpoint(format!(
                "unsupported format {} version {}",
                self.format, self.version
            )));
        }
        if let Some(arch) = expected {
            if *arch != self.architecture {
                return Err(NnError::IncompatibleCheckpoint(format!(
                    "architecture {:?} does not match configured {:?}",
                    self.architecture, arch
                )));
            }
        }
        let mut policy = Policy::new(self.architecture, 0)
            .map_err(|e| NnError::IncompatibleCheckpoint(e.to_string()))?;
        import(&mut policy.actor, &self.actor)?;
        import(&mut policy.critic, &self.critic)?;
        Ok(policy)
    }
}

pub fn save_checkpoint(path: &Path, policy: &Policy) -> Result<(), NnError> {
    let text = serde_json::to_string(&Checkpoint::from_policy(policy))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&Architecture>) -> Result<Policy, NnError> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| NnError::IncompatibleCheckpoint(e.to_string()))?;
    ckpt.into_policy(expected)
}
