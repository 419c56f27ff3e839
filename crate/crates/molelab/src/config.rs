//! The TOML experiment file: sections for the synthetic task, the layer, the
//! router, the losses, and the training loop, plus dotted-path overrides.
//!
//! Unknown keys are rejected; missing keys take the desk-scale defaults.
//! Overrides (`--set section.key=value`) are applied to the parsed TOML tree
//! after loading and before the typed validation pass, so they are checked
//! exactly like file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::mole::LayerDims;
use crate::routing::RoutingConfig;
use crate::trainer::{GridAxis, Optimizer, RunSpec, SyntheticTaskSpec, TrainConfig};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "MOLELAB_OUT";

/// `[model]` section: the layer shape is taken from the task; only the LoRA
/// hyperparameters live here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            rank: 4,
            lora_alpha: 8.0,
        }
    }
}

/// `[train]` section (routing and loss live in their own sections).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub round_length: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            steps: t.steps,
            round_length: t.round_length,
            optimizer: t.optimizer,
            seed: t.seed,
        }
    }
}

/// `[output]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

/// The full experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub model: ModelSection,
    pub routing: RoutingConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub output: OutputSection,
    /// Optional ablation axes, e.g. `q = [1.0, 1.1, 1.2]`.
    pub axes: BTreeMap<String, Vec<f64>>,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: a 4-cluster task routed over 4 experts. The
    /// routing section narrows [`RoutingConfig::default`] (the 6-expert
    /// reference baseline) to the default task's size.
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec::default(),
            model: ModelSection::default(),
            routing: RoutingConfig {
                n_experts: 4,
                ..RoutingConfig::default()
            },
            loss: LossConfig::default(),
            train: TrainSection::default(),
            output: OutputSection::default(),
            axes: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale two-cluster/two-expert demo: the smallest task on which
    /// router specialization is visible. keep_top_k is 1 so the sparse
    /// branch actually narrows the mixture at N = 2.
    pub fn two_cluster_demo() -> Self {
        let mut cfg = Self::default();
        cfg.task.n_clusters = 2;
        cfg.routing.n_experts = 2;
        cfg.routing.keep_top_k = 1;
        cfg
    }

    /// Parse a TOML string with `--set`-style dotted overrides applied.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
        for entry in overrides {
            apply_override(&mut tree, entry)?;
        }
        let cfg: ExperimentConfig = tree
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, applying overrides before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_run_spec().validate()
    }

    /// Assemble the trainer-facing run specification.
    pub fn to_run_spec(&self) -> RunSpec {
        RunSpec {
            task: self.task.clone(),
            dims: LayerDims {
                d_in: self.task.input_dim,
                d_out: self.task.output_dim,
                rank: self.model.rank,
                lora_alpha: self.model.lora_alpha,
            },
            train: TrainConfig {
                routing: self.routing.clone(),
                loss: self.loss,
                learning_rate: self.train.learning_rate,
                batch_size: self.train.batch_size,
                steps: self.train.steps,
                round_length: self.train.round_length,
                optimizer: self.train.optimizer,
                seed: self.train.seed,
            },
        }
    }

    /// Ablation axes from the `[axes]` table, in sorted name order.
    pub fn grid_axes(&self) -> Vec<GridAxis> {
        self.axes
            .iter()
            .map(|(name, values)| GridAxis {
                name: name.clone(),
                values: values.clone(),
            })
            .collect()
    }

    /// Resolve the output directory: explicit flag, then the `MOLELAB_OUT`
    /// environment variable, then the `[output] dir` value.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(dir) = flag {
            return dir.to_path_buf();
        }
        if let Ok(env_dir) = std::env::var(OUT_DIR_ENV) {
            if !env_dir.is_empty() {
                return PathBuf::from(env_dir);
            }
        }
        self.output.dir.clone()
    }

    /// The fully resolved config as a JSON value, for embedding in outputs.
    pub fn echo_json(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Apply one `section.key=value` override to the TOML tree. Intermediate
/// tables are created as needed; the value is parsed as TOML, falling back
/// to a plain string (so `optimizer=adamw` works unquoted).
fn apply_override(tree: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw_value) = entry
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{entry}' is not KEY=VALUE")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Usage(format!("override '{entry}' has an empty key")));
    }
    let value = parse_toml_value(raw_value.trim())?;

    let mut segments = path.split('.').peekable();
    let mut table = tree;
    while let Some(segment) = segments.next() {
        if segments.peek().is_none() {
            table.insert(segment.to_string(), value);
            return Ok(());
        }
        let nested = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = nested.as_table_mut().ok_or_else(|| {
            Error::Usage(format!("override '{entry}': '{segment}' is not a table"))
        })?;
    }
    unreachable!("split produces at least one segment");
}

fn parse_toml_value(raw: &str) -> Result<toml::Value> {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => Ok(t.remove("v").expect("key v exists")),
        Err(_) => Ok(toml::Value::String(raw.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        let cfg = ExperimentConfig::two_cluster_demo();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.routing.n_experts, 2);
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[routing]\nn_experts = 6\nkeep_top_k = 3\n\n[train]\nsteps = 50\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.routing.n_experts, 6);
        assert_eq!(cfg.routing.keep_top_k, 3);
        assert_eq!(cfg.train.steps, 50);
        assert_eq!(cfg.task, SyntheticTaskSpec::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[routing]\nn_expertz = 6\n", &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("[nonsense]\nx = 1\n", &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_values_rejected_at_load() {
        assert!(ExperimentConfig::from_toml("[routing]\ntop_p = 1.5\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("[loss]\nbeta = -0.5\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("[task]\nn_clusters = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_apply_after_file() {
        let cfg = ExperimentConfig::from_toml(
            "[routing]\nkeep_top_k = 2\n",
            &[
                "routing.keep_top_k=3".to_string(),
                "train.seed=7".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.routing.keep_top_k, 3);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn overrides_parse_floats_strings_and_validate() {
        let cfg = ExperimentConfig::from_toml(
            "",
            &[
                "loss.beta=1e-3".to_string(),
                "train.optimizer=adamw".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.beta, 1e-3);
        assert_eq!(cfg.train.optimizer, Optimizer::Adamw);

        // An override that breaks an invariant fails validation.
        assert!(ExperimentConfig::from_toml("", &["routing.keep_top_k=99".to_string()]).is_err());
        // Malformed override syntax is a usage error.
        assert!(matches!(
            ExperimentConfig::from_toml("", &["no-equals-sign".to_string()]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn axes_table_round_trips() {
        let cfg =
            ExperimentConfig::from_toml("[axes]\nq = [1.0, 1.1, 1.2]\nk = [1, 2]\n", &[]).unwrap();
        let axes = cfg.grid_axes();
        assert_eq!(axes.len(), 2);
        // BTreeMap sorts by name.
        assert_eq!(axes[0].name, "k");
        assert_eq!(axes[0].values, vec![1.0, 2.0]);
        assert_eq!(axes[1].name, "q");
        assert_eq!(axes[1].values, vec![1.0, 1.1, 1.2]);
    }

    #[test]
    fn out_dir_precedence() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolve_out_dir(None), PathBuf::from("runs"));
        assert_eq!(
            cfg.resolve_out_dir(Some(Path::new("elsewhere"))),
            PathBuf::from("elsewhere")
        );
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = ExperimentConfig::load(Path::new("/no/such/config.toml"), &[]);
        match err {
            Err(Error::Io { path, .. }) => {
                assert_eq!(path, PathBuf::from("/no/such/config.toml"));
            }
            other => panic!("expected io error, got {other:?}"),
        }
    }
}
