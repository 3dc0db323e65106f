//! Pipeline configuration: a JSON file with `server`, `job`, `solver`,
//! `data`, and `stream` sections, validated before any process spawns.
//! Unknown keys are rejected. Environment variables of the form
//! `BRIDGEGRID_<SECTION>_<KEY>` override individual keys; values are
//! parsed as JSON when possible, else taken as strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collectives::AllreduceVariant;
use crate::ptycho::{SimulateSpec, SolverConfig};

use super::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub server: ServerSection,
    pub job: JobSection,
    pub solver: SolverConfig,
    pub data: DataSection,
    pub stream: StreamSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    /// Directory for contact files; a temp dir under the output directory
    /// when absent.
    pub contact_dir: Option<PathBuf>,
    /// Port to bind; 0 or absent picks an ephemeral port.
    pub port: Option<u16>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JobSection {
    pub workers: u32,
    /// Overrides `solver.allreduce_variant` when present.
    pub allreduce_variant: Option<AllreduceVariant>,
}

impl Default for JobSection {
    fn default() -> Self {
        JobSection {
            workers: 1,
            allreduce_variant: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Existing dataset directory.
    pub path: Option<PathBuf>,
    /// Generate a dataset instead of loading one.
    pub simulate: Option<SimulateSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    pub interval_ms: Option<u64>,
    pub replay: Option<PathBuf>,
}

impl PipelineConfig {
    /// Load from a JSON file, then apply environment overrides, then
    /// validate.
    pub fn load(path: &Path) -> Result<PipelineConfig, CliError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut value: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| CliError::config(format!("config is not valid JSON: {e}")))?;
        apply_env_overrides(&mut value, |name| std::env::var(name).ok());
        let config: PipelineConfig = serde_json::from_value(value)
            .map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.job.workers == 0 {
            return Err(CliError::config("job.workers must be at least 1"));
        }
        self.solver
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        Ok(())
    }

    /// The variant collective reductions should use: the job section wins
    /// over the solver section.
    pub fn allreduce_variant(&self) -> AllreduceVariant {
        self.job
            .allreduce_variant
            .unwrap_or(self.solver.allreduce_variant)
    }

    /// The solver config actually handed to workers.
    pub fn effective_solver(&self) -> SolverConfig {
        SolverConfig {
            allreduce_variant: self.allreduce_variant(),
            ..self.solver
        }
    }
}

/// Keys that may be overridden from the environment, one env var per
/// (section, key) pair.
const OVERRIDABLE: &[(&str, &str)] = &[
    ("server", "contact_dir"),
    ("server", "port"),
    ("job", "workers"),
    ("job", "allreduce_variant"),
    ("solver", "algorithm"),
    ("solver", "beta"),
    ("solver", "gamma1"),
    ("solver", "gamma2"),
    ("solver", "iterations"),
    ("solver", "eps_reg"),
    ("solver", "allreduce_variant"),
    ("solver", "constraints"),
    ("solver", "probe_update_start"),
    ("solver", "diverge_abort"),
    ("data", "path"),
    ("data", "simulate"),
    ("stream", "interval_ms"),
    ("stream", "replay"),
];

fn apply_env_overrides(
    value: &mut serde_json::Value,
    env: impl Fn(&str) -> Option<String>,
) {
    for (section, key) in OVERRIDABLE {
        let name = format!(
            "BRIDGEGRID_{}_{}",
            section.to_uppercase(),
            key.to_uppercase()
        );
        let Some(text) = env(&name) else { continue };
        let parsed = serde_json::from_str::<serde_json::Value>(&text)
            .unwrap_or(serde_json::Value::String(text));
        let obj = value
            .as_object_mut()
            .expect("config root is an object after parse");
        let section_value = obj
            .entry(section.to_string())
            .or_insert_with(|| serde_json::json!({}));
        if let Some(map) = section_value.as_object_mut() {
            map.insert(key.to_string(), parsed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ptycho::Algorithm;

    #[test]
    fn defaults_parse_from_empty_object() {
        let c: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.job.workers, 1);
        assert_eq!(c.solver.algorithm, Algorithm::Raar);
    }

    #[test]
    fn unknown_keys_rejected() {
        let result = serde_json::from_str::<PipelineConfig>(r#"{"jobz": {}}"#);
        assert!(result.is_err());
        let result =
            serde_json::from_str::<PipelineConfig>(r#"{"job": {"workerz": 3}}"#);
        assert!(result.is_err());
    }

    #[test]
    fn job_variant_overrides_solver_variant() {
        let c: PipelineConfig = serde_json::from_str(
            r#"{"job": {"allreduce_variant": "ring"}, "solver": {"allreduce_variant": "tree"}}"#,
        )
        .unwrap();
        assert_eq!(c.allreduce_variant(), AllreduceVariant::Ring);
        assert_eq!(
            c.effective_solver().allreduce_variant,
            AllreduceVariant::Ring
        );
    }

    #[test]
    fn env_overrides_parse_json_or_string() {
        let mut value = serde_json::json!({"job": {"workers": 1}});
        apply_env_overrides(&mut value, |name| match name {
            "BRIDGEGRID_JOB_WORKERS" => Some("4".to_string()),
            "BRIDGEGRID_DATA_PATH" => Some("/tmp/somewhere".to_string()),
            "BRIDGEGRID_SOLVER_CONSTRAINTS" => Some(
                r#"{"amp_min":0.9,"amp_max":1.0,"phase_min":-0.1,"phase_max":0.01,"enabled":true}"#
                    .to_string(),
            ),
            _ => None,
        });
        let c: PipelineConfig = serde_json::from_value(value).unwrap();
        assert_eq!(c.job.workers, 4);
        assert_eq!(c.data.path, Some(PathBuf::from("/tmp/somewhere")));
        assert!(c.solver.constraints.enabled);
        assert_eq!(c.solver.constraints.amp_min, 0.9);
    }
}
