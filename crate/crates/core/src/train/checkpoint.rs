use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reviewkd_tensor::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nets::{ArchSpec, StageNet};

/// Serialized network weights plus the hash of the run that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub config_hash: String,
    /// Epoch after which the weights were taken; `None` before training.
    pub epoch: Option<usize>,
    pub accuracy: f64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn capture(net: &StageNet, store: &ParamStore, config_hash: &str, epoch: Option<usize>, accuracy: f64) -> Self {
        Self {
            arch: net.spec().clone(),
            config_hash: config_hash.to_string(),
            epoch,
            accuracy,
            params: store.subset(&net.param_ids()),
        }
    }

    /// Rebuilds the network and a store holding only its weights.
    pub fn restore(&self) -> Result<(StageNet, ParamStore)> {
        let mut store = ParamStore::new();
        let net = StageNet::new(self.arch.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        store.load_subset(&net.param_ids(), &self.params)?;
        Ok((net, store))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Other(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}
