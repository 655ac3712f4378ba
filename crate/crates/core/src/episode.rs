//! Navigation tasks and their dataset files.
//!
//! Episode files follow the R2R distribution layout: one entry per path, each
//! carrying several instructions. Every (path, instruction) pair becomes one
//! [`Episode`] with id `<path_id>_<instruction index>`. Headings in the file
//! are radians, as in R2R; episodes store degrees.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{normalize_heading, SceneGraph};

pub const DEFAULT_MAX_STEPS: u32 = 15;
pub const LONG_HORIZON_MAX_STEPS: u32 = 30;
pub const DEFAULT_MAX_REPLANS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum DatasetMode {
    #[default]
    #[serde(rename = "r2r", alias = "R2R")]
    R2r,
    #[serde(rename = "reverie", alias = "REVERIE")]
    Reverie,
    #[serde(rename = "r4r", alias = "R4R")]
    R4r,
}

impl DatasetMode {
    pub fn default_max_steps(self) -> u32 {
        match self {
            DatasetMode::R4r => LONG_HORIZON_MAX_STEPS,
            _ => DEFAULT_MAX_STEPS,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DatasetMode::R2r => "R2R",
            DatasetMode::Reverie => "REVERIE",
            DatasetMode::R4r => "R4R",
        }
    }
}

impl fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DatasetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r2r" => Ok(DatasetMode::R2r),
            "reverie" => Ok(DatasetMode::Reverie),
            "r4r" => Ok(DatasetMode::R4r),
            other => Err(format!("unknown dataset mode {other:?} (expected r2r, reverie or r4r)")),
        }
    }
}

/// Limits fixed for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Move actions allowed before the episode is cut off.
    pub max_steps: u32,
    pub max_replans: u32,
}

impl Budget {
    pub fn for_mode(mode: DatasetMode) -> Self {
        Self {
            max_steps: mode.default_max_steps(),
            max_replans: DEFAULT_MAX_REPLANS,
        }
    }
}

impl Default for Budget {
    fn default() -> Self {
        Self::for_mode(DatasetMode::R2r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub scan: String,
    pub instruction: String,
    /// Initial heading in degrees.
    pub heading: f64,
    pub gt_path: Vec<String>,
    pub mode: DatasetMode,
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("cannot read episode file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed episode file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("episode {0} has an empty path")]
    EmptyPath(String),
    #[error("episode {0} has no instruction")]
    NoInstruction(String),
    #[error("episode {episode} is for scan {expected}, scene is {found}")]
    WrongScene {
        episode: String,
        expected: String,
        found: String,
    },
    #[error("episode {episode}: {source}")]
    Scene {
        episode: String,
        source: crate::scene::SceneError,
    },
}

impl Episode {
    pub fn start(&self) -> &str {
        &self.gt_path[0]
    }

    pub fn goal(&self) -> &str {
        self.gt_path.last().expect("validated non-empty path")
    }

    /// Moves along the reference path.
    pub fn gt_steps(&self) -> usize {
        self.gt_path.len().saturating_sub(1)
    }

    /// Checks the episode against its scene: known viewpoints, reachable goal.
    pub fn validate(&self, graph: &SceneGraph) -> Result<(), EpisodeError> {
        if self.gt_path.is_empty() {
            return Err(EpisodeError::EmptyPath(self.id.clone()));
        }
        if self.instruction.trim().is_empty() {
            return Err(EpisodeError::NoInstruction(self.id.clone()));
        }
        if !graph.scan().is_empty() && graph.scan() != self.scan {
            return Err(EpisodeError::WrongScene {
                episode: self.id.clone(),
                expected: self.scan.clone(),
                found: graph.scan().to_string(),
            });
        }
        let scene = |source| EpisodeError::Scene {
            episode: self.id.clone(),
            source,
        };
        for id in &self.gt_path {
            graph.viewpoint(id).map_err(scene)?;
        }
        graph.shortest_path_length(self.start(), self.goal()).map_err(scene)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRecord {
    pub path_id: serde_json::Value,
    pub scan: String,
    #[serde(default)]
    pub heading: f64,
    pub path: Vec<String>,
    pub instructions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<DatasetMode>,
}

fn path_id_text(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Expands path records into episodes. `default_mode` applies to records
/// without a `mode` field.
pub fn episodes_from_records(records: &[PathRecord], default_mode: DatasetMode) -> Result<Vec<Episode>, EpisodeError> {
    let mut episodes = Vec::new();
    for record in records {
        let path_id = path_id_text(&record.path_id);
        if record.path.is_empty() {
            return Err(EpisodeError::EmptyPath(path_id));
        }
        if record.instructions.is_empty() {
            return Err(EpisodeError::NoInstruction(path_id));
        }
        for (i, instruction) in record.instructions.iter().enumerate() {
            episodes.push(Episode {
                id: format!("{path_id}_{i}"),
                scan: record.scan.clone(),
                instruction: instruction.clone(),
                heading: normalize_heading(record.heading.to_degrees()),
                gt_path: record.path.clone(),
                mode: record.mode.unwrap_or(default_mode),
            });
        }
    }
    Ok(episodes)
}

pub fn load_episodes(path: impl AsRef<Path>, default_mode: DatasetMode) -> Result<Vec<Episode>, EpisodeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EpisodeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let records: Vec<PathRecord> = serde_json::from_str(&text)?;
    episodes_from_records(&records, default_mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2r_records_expand_per_instruction() {
        let text = r#"[{"path_id": 7, "scan": "t5", "heading": 1.5707963267948966,
            "path": ["A","B","E"], "instructions": ["go", "walk"]},
            {"path_id": "x", "scan": "t5", "heading": 0, "path": ["A"], "instructions": ["stay"], "mode": "R4R"}]"#;
        let records: Vec<PathRecord> = serde_json::from_str(text).unwrap();
        let eps = episodes_from_records(&records, DatasetMode::Reverie).unwrap();
        assert_eq!(eps.len(), 3);
        assert_eq!(eps[0].id, "7_0");
        assert_eq!(eps[1].id, "7_1");
        assert!((eps[0].heading - 90.0).abs() < 1e-9);
        assert_eq!(eps[0].mode, DatasetMode::Reverie);
        assert_eq!(eps[2].mode, DatasetMode::R4r);
        assert_eq!(eps[0].goal(), "E");
        assert_eq!(eps[0].gt_steps(), 2);
    }

    #[test]
    fn budgets_follow_mode() {
        assert_eq!(Budget::for_mode(DatasetMode::R2r).max_steps, 15);
        assert_eq!(Budget::for_mode(DatasetMode::Reverie).max_steps, 15);
        assert_eq!(Budget::for_mode(DatasetMode::R4r).max_steps, 30);
        assert_eq!(Budget::default().max_replans, 1);
        assert_eq!("R4R".parse::<DatasetMode>(), Ok(DatasetMode::R4r));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_episodes("/nope/episodes.json", DatasetMode::R2r).unwrap_err();
        assert!(err.to_string().contains("/nope/episodes.json"));
    }
}
