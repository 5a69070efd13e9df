//! Adapter for SAM-family checkpoints stored on local disk.
//!
//! Descriptors and checkpoint files are validated here. No checkpoint
//! backend ships with this crate, so a valid descriptor still ends in a
//! configuration error naming the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SegmenterHandle;
use crate::error::{Result, UapError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamVariant {
    VitB,
    VitL,
    VitH,
    /// TinyViT image encoder.
    VitT,
}

impl std::str::FromStr for SamVariant {
    type Err = UapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vit_b" => Ok(SamVariant::VitB),
            "vit_l" => Ok(SamVariant::VitL),
            "vit_h" => Ok(SamVariant::VitH),
            "vit_t" | "mobile" | "tiny" => Ok(SamVariant::VitT),
            other => Err(UapError::Config(format!("unsupported SAM variant '{other}'"))),
        }
    }
}

/// Describes a local checkpoint: `{variant, checkpoint_path, device}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub variant: String,
    pub checkpoint_path: PathBuf,
    #[serde(default = "default_device")]
    pub device: String,
}

fn default_device() -> String {
    std::env::var("UAP_DEVICE").unwrap_or_else(|_| "cpu".to_string())
}

impl ModelDescriptor {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UapError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| UapError::format(path, e.to_string()))
    }

    pub fn parsed_variant(&self) -> Result<SamVariant> {
        self.variant.parse()
    }
}

fn check_checkpoint(path: &Path) -> Result<()> {
    let meta = std::fs::metadata(path).map_err(|e| UapError::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if !meta.is_file() || meta.len() == 0 {
        return Err(UapError::Load {
            path: path.to_path_buf(),
            reason: "not a non-empty regular file".into(),
        });
    }
    Ok(())
}

pub fn load_external_segmenter(desc: &ModelDescriptor) -> Result<SegmenterHandle> {
    let variant = desc.parsed_variant()?;
    if desc.device != "cpu" {
        return Err(UapError::Config(format!("unsupported device '{}'", desc.device)));
    }
    check_checkpoint(&desc.checkpoint_path)?;
    load_model(variant, &desc.checkpoint_path)
}

fn load_model(variant: SamVariant, path: &Path) -> Result<SegmenterHandle> {
    Err(UapError::Config(format!(
        "cannot load {} ({variant:?}): no checkpoint backend is compiled into this build",
        path.display()
    )))
}
