//! Experiment configuration: one TOML file describes a run completely.
//!
//! Every key mirrors a field below; unknown keys are hard errors, and the
//! three role seeds must be spelled out (no ambient entropy). Relative paths
//! are resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tqn_core::decoder::TqnConfig;
use tqn_core::factorization::FactorizationSchema;
use tqn_core::optim::OptimizerConfig;
use tqn_core::rngs::SeedBundle;
use tqn_core::schedule::{PhiMode, StageSchedule};
use tqn_core::synth::GeneratorConfig;
use tqn_core::variants::VariantKind;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in reports. Defaults to the variant name.
    #[serde(default)]
    pub label: Option<String>,
    /// One of: tqn, avgpool, selfattn_cls, multilabel_bce, seq2seq.
    pub variant: String,
    /// Queries table (CSV) of the label factorisation.
    pub queries: PathBuf,
    /// Classes table (CSV) of the label factorisation.
    pub classes: PathBuf,
    /// Where this run's artifacts land.
    pub output_dir: PathBuf,
    /// Dataset container; defaults to `<output_dir>/dataset.tqn`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub seeds: SeedsSection,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
}

/// The three role seeds. All required: a run must be replayable from its
/// config alone.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub data: u64,
    pub init: u64,
    pub train: u64,
}

impl From<SeedsSection> for SeedBundle {
    fn from(s: SeedsSection) -> Self {
        SeedBundle {
            data: s.data,
            init: s.init,
            train: s.train,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout_layer: f64,
    pub dropout_output: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            model_dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            dropout_layer: 0.1,
            dropout_output: 0.5,
        }
    }
}

impl ModelSection {
    pub fn tqn_config(&self, schema: &FactorizationSchema) -> TqnConfig {
        TqnConfig::for_schema(
            schema,
            self.feature_dim,
            self.model_dim,
            self.layers,
            self.heads,
            self.ff_dim,
            self.dropout_layer,
            self.dropout_output,
        )
    }
}

/// How stage 2 feeds clip features to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Mode {
    /// Feature bank with a sliding online window, refreshed after each step.
    BankUpdated,
    /// Feature bank served as frozen constants; the encoder stops training.
    BankFrozen,
    /// No bank: every clip encoded online (full end-to-end training).
    Online,
    /// No bank: a random crop of `crop_fraction` of the clips per iteration.
    OnlineCrop,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub stage1_epochs: usize,
    pub stage1_max_frames: usize,
    pub stage2_epochs: usize,
    pub n_online: usize,
    pub mode: Stage2Mode,
    /// Clip fraction for `mode = "online_crop"`.
    pub crop_fraction: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let stages = StageSchedule::default();
        Self {
            stage1_epochs: stages.stage1_epochs,
            stage1_max_frames: stages.stage1_max_frames,
            stage2_epochs: stages.stage2_epochs,
            n_online: stages.n_online,
            mode: Stage2Mode::BankUpdated,
            crop_fraction: 0.25,
        }
    }
}

impl ScheduleSection {
    pub fn stage_schedule(&self) -> StageSchedule {
        StageSchedule {
            stage1_epochs: self.stage1_epochs,
            stage1_max_frames: self.stage1_max_frames,
            stage2_epochs: self.stage2_epochs,
            n_online: self.n_online,
        }
    }

    pub fn phi_mode(&self) -> CliResult<PhiMode> {
        match self.mode {
            Stage2Mode::BankUpdated => Ok(PhiMode::BankUpdated),
            Stage2Mode::BankFrozen => Ok(PhiMode::BankFrozen),
            Stage2Mode::Online => Ok(PhiMode::Online),
            Stage2Mode::OnlineCrop => {
                if self.crop_fraction > 0.0 && self.crop_fraction <= 1.0 {
                    Ok(PhiMode::OnlineCrop(self.crop_fraction))
                } else {
                    Err(CliError::Config(format!(
                        "crop_fraction {} outside (0, 1]",
                        self.crop_fraction
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            encoder_lr: d.encoder_lr,
            decoder_lr: d.decoder_lr,
            weight_decay: d.weight_decay,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            batch_size: d.batch_size,
        }
    }
}

impl From<OptimizerSection> for OptimizerConfig {
    fn from(s: OptimizerSection) -> Self {
        OptimizerConfig {
            encoder_lr: s.encoder_lr,
            decoder_lr: s.decoder_lr,
            weight_decay: s.weight_decay,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            batch_size: s.batch_size,
        }
    }
}

/// A parsed config plus everything needed to use it: the directory its
/// relative paths resolve against and the effective TOML snapshot (after
/// command-line overrides) that is stored in checkpoints and manifests.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub cfg: ExperimentConfig,
    base: PathBuf,
    pub effective_toml: String,
}

impl LoadedConfig {
    /// Reads and validates a config file, then applies `--out` and
    /// `--seed-override` values.
    pub fn load(
        path: &Path,
        out_override: Option<&Path>,
        seed_overrides: &[String],
    ) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("in {}: {e}", path.display())))?;
        if let Some(out) = out_override {
            cfg.output_dir = absolutize(out)?;
        }
        for item in seed_overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                CliError::Config(format!("seed override `{item}` is not of the form k=v"))
            })?;
            let value: u64 = value.parse().map_err(|_| {
                CliError::Config(format!("seed override `{item}`: value is not an integer"))
            })?;
            match key {
                "data" => cfg.seeds.data = value,
                "init" => cfg.seeds.init = value,
                "train" => cfg.seeds.train = value,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown seed `{other}` (expected data, init, or train)"
                    )))
                }
            }
        }
        let base = absolutize(path)?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let effective_toml = toml::to_string_pretty(&cfg)
            .map_err(|e| CliError::Config(format!("cannot serialise config: {e}")))?;
        let loaded = Self {
            cfg,
            base,
            effective_toml,
        };
        loaded.variant()?;
        loaded.cfg.schedule.phi_mode()?;
        for schema_path in [loaded.queries_path(), loaded.classes_path()] {
            if !schema_path.is_file() {
                return Err(CliError::Config(format!(
                    "missing schema file: {}",
                    schema_path.display()
                )));
            }
        }
        Ok(loaded)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn queries_path(&self) -> PathBuf {
        self.resolve(&self.cfg.queries)
    }

    pub fn classes_path(&self) -> PathBuf {
        self.resolve(&self.cfg.classes)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.output_dir)
    }

    pub fn dataset_path(&self) -> PathBuf {
        match &self.cfg.dataset {
            Some(p) => self.resolve(p),
            None => self.output_dir().join("dataset.tqn"),
        }
    }

    pub fn label(&self) -> String {
        self.cfg
            .label
            .clone()
            .unwrap_or_else(|| self.cfg.variant.clone())
    }

    pub fn variant(&self) -> CliResult<VariantKind> {
        VariantKind::parse(&self.cfg.variant).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load_schema(&self) -> CliResult<FactorizationSchema> {
        FactorizationSchema::load(&self.queries_path(), &self.classes_path())
            .map_err(|e| CliError::Config(format!("schema: {e}")))
    }
}

fn absolutize(p: &Path) -> CliResult<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir()
        .map_err(|e| CliError::Data(format!("cannot determine working directory: {e}")))?;
    Ok(cwd.join(p))
}
