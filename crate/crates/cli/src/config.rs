//! Config file schemas (TOML) and run manifests.
//!
//! Every field has a default, so an empty file (or no file) is a valid
//! config. Each command writes the fully resolved config next to its outputs;
//! feeding that file back reproduces the run.

use std::fs;
use std::path::Path;

use manifold_recon::generator::{Activation, GeneratorConfig};
use manifold_recon::objective::RegWeights;
use manifold_recon::trainer::{default_schedule, TrainConfig, TrainMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{require_input, CliError, CliResult};

/// Reads a TOML config, or returns the defaults when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    require_input(path)?;
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(value: &T) -> CliResult<String> {
    toml::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquireConfig {
    pub lines_per_frame: usize,
    pub num_coils: usize,
    /// Defaults to the phantom's own `noise_sigma`.
    pub noise_sigma: Option<f64>,
    pub seed: u64,
}

impl Default for AcquireConfig {
    fn default() -> Self {
        Self {
            lines_per_frame: 6,
            num_coils: 4,
            noise_sigma: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub latent_dim: usize,
    pub base_channels: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            base_channels: 32,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

/// Default epochs per stage for the progressive schedule `[1, N/5, N]`.
pub const DEFAULT_EPOCHS: [usize; 3] = [100, 100, 300];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Defaults to `[1, ceil(N/5), N]`.
    pub stage_frame_counts: Option<Vec<usize>>,
    /// Defaults to the trailing entries of [`DEFAULT_EPOCHS`].
    pub epochs_per_stage: Option<Vec<usize>>,
    /// `false` collapses the schedule to its final stage.
    pub progressive: bool,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_z: f64,
    pub adam_betas: [f64; 2],
    pub seed: u64,
    pub mode: TrainMode,
    pub eval_every: usize,
    pub latent_snapshot_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let w = RegWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            stage_frame_counts: None,
            epochs_per_stage: None,
            progressive: true,
            batch_size: 10,
            lr_theta: 1e-3,
            lr_z: 1e-2,
            adam_betas: [0.9, 0.999],
            seed: 0,
            mode: TrainMode::Joint,
            eval_every: 5,
            latent_snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub generator: GeneratorSection,
    pub train: TrainSection,
}

impl ReconstructConfig {
    /// Materializes every default for a data set of `num_frames` frames of
    /// side `size`; returns the resolved file form and the library configs.
    pub fn resolve(
        mut self,
        num_frames: usize,
        size: usize,
    ) -> CliResult<(Self, GeneratorConfig, TrainConfig)> {
        let t = &mut self.train;
        let counts = t
            .stage_frame_counts
            .clone()
            .unwrap_or_else(|| default_schedule(num_frames));
        let epochs = match &t.epochs_per_stage {
            Some(e) => e.clone(),
            None => DEFAULT_EPOCHS[DEFAULT_EPOCHS.len().saturating_sub(counts.len())..]
                .iter()
                .copied()
                .chain(std::iter::repeat(DEFAULT_EPOCHS[0]))
                .take(counts.len())
                .collect(),
        };
        let mut train = TrainConfig {
            weights: RegWeights {
                lambda1: t.lambda1,
                lambda2: t.lambda2,
            },
            epochs_per_stage: epochs,
            stage_frame_counts: counts,
            batch_size: t.batch_size,
            lr_theta: t.lr_theta,
            lr_z: t.lr_z,
            adam_betas: (t.adam_betas[0], t.adam_betas[1]),
            seed: t.seed,
            mode: t.mode,
            eval_every: t.eval_every,
            latent_snapshot_every: t.latent_snapshot_every,
        };
        if !t.progressive {
            train = train.without_progression();
        }
        train.validate()?;
        if train.stage_frame_counts.last() != Some(&num_frames) {
            return Err(CliError::Validation(format!(
                "last stage has {:?} frames but the measurements have {num_frames}",
                train.stage_frame_counts.last()
            )));
        }
        t.stage_frame_counts = Some(train.stage_frame_counts.clone());
        t.epochs_per_stage = Some(train.epochs_per_stage.clone());

        let g = &self.generator;
        let gen = GeneratorConfig::new(g.latent_dim, size, g.base_channels, g.seed)
            .with_activation(g.activation);
        gen.validate()?;
        Ok((self, gen, train))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> CliResult<FileHash> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub args: Vec<String>,
    /// The fully resolved config.
    pub config: serde_json::Value,
    /// Path of the resolved config written next to the outputs.
    pub config_path: Option<String>,
    pub seeds: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args: std::env::args().skip(1).collect(),
            config,
            config_path: None,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> CliResult<Self> {
        self.inputs.push(hash_file(path)?);
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> CliResult<Self> {
        self.outputs.push(hash_file(path)?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let cfg: ReconstructConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ReconstructConfig::default());
        let (resolved, gen, train) = cfg.resolve(150, 64).unwrap();
        assert_eq!(train.stage_frame_counts, vec![1, 30, 150]);
        assert_eq!(train.epochs_per_stage, DEFAULT_EPOCHS.to_vec());
        assert_eq!(gen.output_shape, (64, 64));
        // the resolved form round-trips and resolves to the same configs
        let text = to_toml(&resolved).unwrap();
        let again: ReconstructConfig = toml::from_str(&text).unwrap();
        assert_eq!(again, resolved);
        let (_, gen2, train2) = again.resolve(150, 64).unwrap();
        assert_eq!((gen2, train2), (gen, train));
    }

    #[test]
    fn no_progressive_collapses_schedule() {
        let mut cfg = ReconstructConfig::default();
        cfg.train.progressive = false;
        let (_, _, train) = cfg.resolve(150, 64).unwrap();
        assert_eq!(train.stage_frame_counts, vec![150]);
        assert_eq!(train.epochs_per_stage, vec![DEFAULT_EPOCHS[2]]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_schedules() {
        assert!(toml::from_str::<ReconstructConfig>("[train]\nlambda3 = 1.0").is_err());
        let mut cfg = ReconstructConfig::default();
        cfg.train.stage_frame_counts = Some(vec![1, 10]);
        assert!(matches!(cfg.resolve(150, 64), Err(CliError::Validation(_))));
    }
}
