//! Model checkpoints as JSON.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use sdt_core::model::ModelConfig;
use sdt_core::params::ParamStore;
use sdt_core::token_post::ClassMemory;
use sdt_core::SdtModel;

use crate::config::model_hash;
use crate::scene_io::{read_json, write_json};
use crate::train::EpochLog;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub memory: ClassMemory,
    #[serde(default)]
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn new(model: &SdtModel, memory: &ClassMemory, log: &[EpochLog]) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: model_hash(&model.config),
            model: model.config.clone(),
            params: model.params.clone(),
            memory: memory.clone(),
            log: log.to_vec(),
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        write_json(self, path)?;
        Ok(())
    }

    /// Reads and verifies a checkpoint against its own embedded config.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let ck: Self = read_json(path)?;
        if ck.format_version != FORMAT_VERSION {
            bail!(
                "{}: unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                path.display(),
                ck.format_version
            );
        }
        let actual = model_hash(&ck.model);
        if actual != ck.config_hash {
            bail!("{}: config hash {} does not match its config ({actual})", path.display(), ck.config_hash);
        }
        Ok(ck)
    }

    /// Rebuilds the model, requiring its config hash to equal `expected`
    /// when given.
    pub fn into_model(self, expected: Option<&str>) -> anyhow::Result<(SdtModel, ClassMemory)> {
        if let Some(h) = expected {
            if h != self.config_hash {
                bail!(
                    "checkpoint was trained with config {} but the run config hashes to {h}",
                    self.config_hash
                );
            }
        }
        let model = SdtModel::from_params(self.model, self.params).context("checkpoint parameters")?;
        Ok((model, self.memory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::train::init;

    fn small() -> RunConfig {
        let mut c = RunConfig::desk();
        c.d = 8;
        c.heads = 2;
        c.hidden = 10;
        c.l_t = 1;
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (model, mem) = init(&small()).unwrap();
        Checkpoint::new(&model, &mem, &[]).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let (back, _) = ck.into_model(Some(&small().model_hash())).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
    }

    #[test]
    fn rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (model, mem) = init(&small()).unwrap();
        let ck = Checkpoint::new(&model, &mem, &[]);

        let mut other = small();
        other.hidden = 12;
        assert!(ck.clone().into_model(Some(&other.model_hash())).is_err());

        let mut bad = ck.clone();
        bad.model.ffn_hidden = 12;
        bad.config_hash = model_hash(&bad.model);
        assert!(bad.into_model(None).is_err());

        let mut tampered = ck.clone();
        tampered.model.prior = 0.5;
        tampered.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let mut version = ck;
        version.format_version = 99;
        version.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
