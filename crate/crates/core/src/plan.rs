//! The pruning plan exchanged between selection, shape propagation, weight
//! surgery and the framework adapter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::select::PruneConfig;

pub const PLAN_FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfsRemoval {
    pub channel: usize,
    pub reference: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_id: String,
    /// Ascending.
    pub kept: Vec<usize>,
    pub removed_dfs: Vec<usize>,
    pub removed_sfs: Vec<SfsRemoval>,
    pub floor_rule_applied: bool,
}

impl LayerPlan {
    pub fn identity(layer_id: impl Into<String>, channels: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            kept: (0..channels).collect(),
            removed_dfs: Vec::new(),
            removed_sfs: Vec::new(),
            floor_rule_applied: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.kept.len() + self.removed_dfs.len() + self.removed_sfs.len()
    }
}

/// A set of layers that must keep identical channel indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub name: String,
    pub members: Vec<String>,
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub format_version: String,
    pub config: PruneConfig,
    /// One threshold per selection pool: `[global]`, or
    /// `[sequential_internal, post_addition]` under two-group pruning.
    pub beta: Vec<f64>,
    pub layers: Vec<LayerPlan>,
    #[serde(default)]
    pub groups: Vec<GroupPlan>,
}

impl PruningPlan {
    pub fn layer(&self, layer_id: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, PlanIoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PlanIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let plan: PruningPlan = serde_json::from_str(&text).map_err(|source| PlanIoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if plan.format_version != PLAN_FORMAT_VERSION {
            return Err(PlanIoError::Version(plan.format_version));
        }
        Ok(plan)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanIoError {
    #[error("cannot read plan {}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse plan {}: {source}", path.display())]
    Json {
        path: std::path::PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported plan format_version {0:?}")]
    Version(String),
}
