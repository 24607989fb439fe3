//! Versioned JSON checkpoint: a map from parameter name to shape and
//! row-major values, plus an opaque metadata block for the model config.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ord2seq-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, StoredParam>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let t = store.value(id);
                (
                    store.name(id).to_string(),
                    StoredParam {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            meta,
            params,
        }
    }

    /// Copies stored values into `store`. Every parameter in the store must be
    /// present with a matching shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}`, expected `{CHECKPOINT_FORMAT}`",
                self.format
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let stored = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if stored.shape != store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    stored.shape,
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = Tensor::new(stored.shape.clone(), stored.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", ck.format)));
        }
        Ok(ck)
    }
}
