use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tactile::dsp::{self, Spectrogram, Waveform};
use tactile::model::TextureGan;

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub class: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, rename = "target")]
    pub targets: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(ServiceError::io(path))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for t in &mut m.targets {
            if t.path.is_relative() {
                t.path = base.join(&t.path);
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub id: String,
    pub class: Option<String>,
    /// The original recording, served as-is.
    pub wav: Vec<u8>,
    /// First normalized segment, the optimization target.
    pub segment: Spectrogram,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetSummary {
    pub id: String,
    pub class: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Targets(BTreeMap<String, Target>);

impl Targets {
    pub fn from_waveforms(model: &TextureGan, items: impl IntoIterator<Item = (String, Option<String>, Waveform)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, class, w) in items {
            let segment = model.dataset.target_segment(&w, &model.norm_stats)?;
            if map.insert(id.clone(), Target { id: id.clone(), class, wav: dsp::encode_wav(&w)?, segment }).is_some() {
                return Err(ServiceError::Config(format!("duplicate target id {id:?}")));
            }
        }
        Ok(Self(map))
    }

    pub fn from_manifest(model: &TextureGan, manifest: &Manifest) -> Result<Self> {
        let items = manifest
            .targets
            .iter()
            .map(|t| Ok((t.id.clone(), t.class.clone(), dsp::read_wav(&t.path)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_waveforms(model, items)
    }

    pub fn get(&self, id: &str) -> Result<&Target> {
        self.0.get(id).ok_or_else(|| ServiceError::NotFound { kind: "target", id: id.into() })
    }

    pub fn summaries(&self) -> Vec<TargetSummary> {
        self.0.values().map(|t| TargetSummary { id: t.id.clone(), class: t.class.clone() }).collect()
    }
}
