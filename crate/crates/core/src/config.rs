//! Pipeline configuration, loadable from TOML or JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downsample::AccelPlan;
use crate::error::{Error, Result};
use crate::geometry::RelationConfig;
use crate::provider::ProviderConfig;
use crate::segmentation::{GripperForceConfig, StabilityConfig};
use crate::transfer::TransferConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_dir: PathBuf,
    /// Id of the annotated episode; defaults to the first episode by file name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_episode: Option<String>,
    pub head_camera: String,
    pub gripper_labels: Vec<String>,
    /// Free-text task description handed to the provider.
    pub task_summary: String,
    pub transfer: TransferConfig,
    pub stability: StabilityConfig,
    pub gripper: GripperForceConfig,
    pub plan: AccelPlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("."),
            reference_episode: None,
            head_camera: RelationConfig::default().head_camera,
            gripper_labels: Vec::new(),
            task_summary: String::new(),
            transfer: TransferConfig::default(),
            stability: StabilityConfig::default(),
            gripper: GripperForceConfig::default(),
            plan: AccelPlan::default(),
            provider: None,
        }
    }
}

impl PipelineConfig {
    /// `.toml` files are parsed as TOML, everything else as JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.transfer.validate()?;
        self.stability.validate()?;
        self.gripper.validate()?;
        self.plan.validate()?;
        if let Some(p) = &self.provider {
            p.validate()?;
        }
        Ok(())
    }

    pub fn relation_config(&self) -> RelationConfig {
        RelationConfig {
            head_camera: self.head_camera.clone(),
            gripper_labels: self.gripper_labels.clone(),
            ..RelationConfig::default()
        }
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downsample::HorizonMode;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        fs::write(
            &t,
            r#"
dataset_dir = "data"
head_camera = "front"

[plan]
n_precision = 1
n_casual = 3
horizon_mode = "geometric"

[provider]
kind = "file"
path = "ep0.segments.json"
"#,
        )
        .unwrap();
        let cfg = PipelineConfig::load(&t).unwrap();
        assert_eq!(cfg.plan.n_casual, 3);
        assert_eq!(cfg.plan.chunk_horizon, AccelPlan::default().chunk_horizon);
        assert_eq!(cfg.plan.horizon_mode, HorizonMode::Geometric);
        assert_eq!(cfg.stability, StabilityConfig::default());
        assert!(matches!(cfg.provider, Some(ProviderConfig::File { .. })));

        let j = dir.path().join("c.json");
        fs::write(&j, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let back = PipelineConfig::load(&j).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn invalid_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("c.json");
        fs::write(&j, r#"{"plan":{"n_precision":4,"n_casual":2}}"#).unwrap();
        assert!(matches!(PipelineConfig::load(&j), Err(Error::Config(_))));
        fs::write(&j, r#"{"transfer":{"rho":1.5}}"#).unwrap();
        assert!(PipelineConfig::load(&j).is_err());
        fs::write(&j, r#"{"unknown":1}"#).unwrap();
        assert!(PipelineConfig::load(&j).is_err());
    }

    #[test]
    fn hash_tracks_changes() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.transfer.snap_window = 10;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
