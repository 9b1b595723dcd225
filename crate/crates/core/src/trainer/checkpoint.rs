use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LogRecord, Stage, TrainConfig, Variant};
use crate::agents::QBot;
use crate::autodiff::{read_u64, ParamStore};
use crate::error::{Error, Result};

const META_MAGIC: &[u8; 4] = b"META";

/// Provenance stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub variant: Variant,
    pub epoch: usize,
    pub config: TrainConfig,
    pub metrics: BTreeMap<String, f64>,
    pub history: Vec<LogRecord>,
}

/// Trained parameters plus their provenance. Adam moments are not saved:
/// every stage starts its optimizer afresh.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub qbot: QBot,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Parameter blob in the flat `DWD1` format, then `META`, a u64 length
    /// and the JSON metadata.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.qbot.params.write_to(w)?;
        let json = serde_json::to_vec(&self.meta)?;
        w.write_all(META_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let params = ParamStore::read_from(r)?;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != META_MAGIC {
            return Err(Error::Format("checkpoint metadata block missing".into()));
        }
        let len = read_u64(r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let meta: CheckpointMeta = serde_json::from_slice(&json)?;
        Ok(Checkpoint {
            qbot: QBot {
                cfg: meta.config.model.clone(),
                params,
            },
            meta,
        })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Checkpoint> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// The same stage-1 weights filed under another variant with the same
    /// pre-training objective, so one run can seed several curricula.
    pub fn relabel(&self, variant: Variant) -> Result<Checkpoint> {
        if self.meta.stage != Stage::Stage1 {
            return Err(Error::Config("only stage-1 checkpoints can be relabelled".into()));
        }
        if variant.z_kind() != self.meta.variant.z_kind() {
            return Err(Error::Config(format!(
                "{} and {} pre-train differently",
                self.meta.variant.name(),
                variant.name()
            )));
        }
        let mut out = self.clone();
        out.meta.variant = variant;
        out.meta.config.variant = variant;
        Ok(out)
    }

    /// Short label used in reports and the game service.
    pub fn tag(&self) -> String {
        format!("{}/{}", self.meta.variant.name(), self.meta.stage.name())
    }
}
