use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::PipelineError;
use crate::dataset::write_atomic;
use crate::gateway::UsageTotals;

pub const MANIFEST_FILE: &str = "run.json";
pub const REQUEST_LOG_FILE: &str = "requests.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    /// Stopped early; a later run can continue it.
    Interrupted,
    /// Finished, but some units of work failed.
    Partial,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Files read, relative to the run directory when inside it.
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Files written, relative to the run directory.
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub wall_clock_ms: u64,
    pub usage: UsageTotals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// The run directory's record of its config, stage outcomes and artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_fingerprint: String,
    pub config: PipelineConfig,
    pub model: String,
    pub embedding_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_fingerprint: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config: &PipelineConfig, model: &str, embedding_model: &str) -> Self {
        Self {
            run_id: config.run_id(),
            config_fingerprint: config.fingerprint(),
            config: config.clone(),
            model: model.into(),
            embedding_model: embedding_model.into(),
            tree_fingerprint: None,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    pub fn known_files(&self) -> BTreeSet<String> {
        let mut known: BTreeSet<String> =
            [MANIFEST_FILE, REQUEST_LOG_FILE].iter().map(|s| s.to_string()).collect();
        for stage in self.stages.values() {
            known.extend(stage.outputs.iter().cloned());
        }
        known
    }

    /// Files in `dir` that no stage lists as an output, including leftover
    /// temp files from interrupted writes.
    pub fn orphans(&self, dir: &Path) -> Vec<String> {
        let known = self.known_files();
        let Ok(entries) = std::fs::read_dir(dir) else {
            return Vec::new();
        };
        let mut orphans: Vec<String> = entries
            .filter_map(Result::ok)
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|name| !known.contains(name))
            .collect();
        orphans.sort();
        orphans
    }
}
