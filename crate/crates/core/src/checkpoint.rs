//! Run checkpoint: model, replay state and gallery in one JSON container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::GallerySet;
use crate::model::ModelState;
use crate::replay::{CentroidStore, ReplayBuffer};

pub const FORMAT: &str = "contembed-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Last completed session.
    pub session: usize,
    pub model: ModelState,
    pub replay: ReplayBuffer,
    pub centroids: CentroidStore,
    pub gallery: GallerySet,
}

impl Checkpoint {
    pub fn new(
        session: usize,
        model: ModelState,
        replay: ReplayBuffer,
        centroids: CentroidStore,
        gallery: GallerySet,
    ) -> Self {
        Checkpoint { format: FORMAT.to_string(), version: VERSION, session, model, replay, centroids, gallery }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.gallery.audit()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
