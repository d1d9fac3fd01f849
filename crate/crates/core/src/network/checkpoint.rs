//! Versioned JSON checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "usnprune-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: NetworkSpec,
    /// One entry per linear layer; weights are row-major.
    pub params: Vec<Params>,
    pub seed_lineage: Vec<u64>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn into_network(self) -> Result<Network> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("not a checkpoint (format {:?})", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut net = Network::from_params(self.spec, self.params)?;
        net.seed_lineage = self.seed_lineage;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

impl Network {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            params: self.params.clone(),
            seed_lineage: self.seed_lineage.clone(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Network> {
        Checkpoint::load(path)?.into_network()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, Shape};

    #[test]
    fn round_trip_is_exact() {
        let spec = NetworkSpec {
            input: Shape::new(1, 4, 4),
            layers: vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel_size: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 32, out_dim: 8 },
                LayerSpec::SoftArgmax { height: 2, width: 2, temperature: 0.5, scale: 2.0 },
            ],
        };
        let net = Network::seeded(spec, 42).unwrap().prune_channels(1, &[false, true]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.seed_lineage(), &[42]);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let spec = NetworkSpec { input: Shape::flat(1), layers: vec![LayerSpec::Dense { in_dim: 1, out_dim: 1 }] };
        let mut ck = Network::zeros(spec).unwrap().to_checkpoint();
        ck.version = 99;
        assert!(matches!(ck.into_network(), Err(Error::Config(_))));
    }
}
