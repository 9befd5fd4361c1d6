//! Run configuration: defaults, then the `--config` file, then flags.

use std::fs;
use std::path::Path;

use amg_core::baseline::MlpConfig;
use amg_core::checkpoint::ModelSpec;
use amg_core::data::GenConfig;
use amg_core::model::ModelConfig;
use amg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Name of the resolved configuration written into every output directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Amg,
    Mlp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(CliError::Usage(format!("unknown precision {s:?} (f32, f64)"))),
        }
    }
}

/// Everything a command needs to replay a result.
///
/// ```toml
/// model_kind = "amg"      # or "mlp"
/// precision = "f64"       # or "f32"
/// [model]                 # AMG architecture and graph hyperparameters
/// [mlp]                   # baseline architecture
/// [train]                 # optimisation schedule
/// [data]                  # generator parameters
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model_kind: ModelKind,
    pub precision: Precision,
    pub model: ModelConfig,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
}

impl RunConfig {
    /// Defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Sets every seed (model, baseline, training, data) to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.mlp.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
    }

    /// Matches the model input/output widths to a dataset's.
    pub fn set_dims(&mut self, (d_pos, d_a, d_u): (usize, usize, usize)) {
        (self.model.d_pos, self.model.d_a, self.model.d_u) = (d_pos, d_a, d_u);
        (self.mlp.d_pos, self.mlp.d_a, self.mlp.d_u) = (d_pos, d_a, d_u);
    }

    pub fn spec(&self) -> ModelSpec {
        match self.model_kind {
            ModelKind::Amg => ModelSpec::Amg(self.model.clone()),
            ModelKind::Mlp => ModelSpec::Mlp(self.mlp.clone()),
        }
    }

    /// Adopts the architecture stored in a checkpoint.
    pub fn set_spec(&mut self, spec: &ModelSpec) {
        match spec {
            ModelSpec::Amg(m) => {
                self.model_kind = ModelKind::Amg;
                self.model = m.clone();
            }
            ModelSpec::Mlp(m) => {
                self.model_kind = ModelKind::Mlp;
                self.mlp = m.clone();
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Writes the resolved config into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    }
}
