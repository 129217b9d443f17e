//! Serialized run reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::CheckpointMetrics;
use crate::error::{Error, Result};
use crate::pipeline::{AnalysisConfig, CheckpointFailure, RunAnalysis};

/// Bumped whenever the layout of [`MetricsReport`] changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// The metrics file written by `analyze` and read by `rank` and `correlate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: AnalysisConfig,
    pub checkpoints: Vec<CheckpointMetrics>,
    #[serde(default)]
    pub failures: Vec<CheckpointFailure>,
}

impl MetricsReport {
    pub fn new(config: AnalysisConfig, analysis: RunAnalysis) -> Self {
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config,
            checkpoints: analysis.checkpoints,
            failures: analysis.failures,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parses a report, rejecting other schema versions before decoding the body.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            schema_version: Option<u32>,
        }
        let header: Header = serde_json::from_str(text)?;
        match header.schema_version {
            Some(SCHEMA_VERSION) => Ok(serde_json::from_str(text)?),
            Some(v) => Err(Error::Schema {
                found: v.to_string(),
                expected: SCHEMA_VERSION,
            }),
            None => Err(Error::Schema {
                found: "missing".into(),
                expected: SCHEMA_VERSION,
            }),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::tests::ckpt;

    fn report() -> MetricsReport {
        MetricsReport::new(
            AnalysisConfig {
                k: 5,
                layer_tag: Some("avgpool".into()),
                ..Default::default()
            },
            RunAnalysis {
                checkpoints: vec![ckpt("a", 1, 1.0, 0.2), ckpt("b", 2, 0.5, 0.1)],
                failures: vec![CheckpointFailure {
                    checkpoint_id: "c".into(),
                    reason: "missing file".into(),
                }],
            },
        )
    }

    #[test]
    fn round_trip() {
        let r = report();
        let text = r.to_json().unwrap();
        assert_eq!(MetricsReport::from_json(&text).unwrap(), r);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["config"]["k"], 5);
        assert_eq!(v["config"]["layer_tag"], "avgpool");
        assert_eq!(v["schema_version"], SCHEMA_VERSION);
    }

    #[test]
    fn schema_version_checked() {
        let mut v: serde_json::Value = serde_json::from_str(&report().to_json().unwrap()).unwrap();
        v["schema_version"] = 99.into();
        assert!(matches!(
            MetricsReport::from_json(&v.to_string()),
            Err(Error::Schema { .. })
        ));
        v.as_object_mut().unwrap().remove("schema_version");
        assert!(MetricsReport::from_json(&v.to_string()).is_err());
    }
}
