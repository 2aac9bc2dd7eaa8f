//! Run configuration: one TOML tree with defaults for every field, plus the
//! command-line overrides shared by all commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use pddpm::data::AnomalyConfig;
use pddpm::denoiser::DenoiserConfig;
use pddpm::noise::{NoiseConfig, NoiseKind};
use pddpm::patching::{PatchGrid, PatchMode};
use pddpm::pipeline::{
    LossMode, TrainConfig, EROSION_ITERATIONS, MEDIAN_KERNEL, MIN_COMPONENT, THRESHOLD_CANDIDATES,
};
use pddpm::schedules::ScheduleConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Intensity thresholding, no model.
    Thresh,
    /// Whole-image noising.
    Ddpm,
    /// Patch-wise noising.
    Pddpm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset manifest (JSON).
    pub manifest: Option<PathBuf>,
    pub downsample: usize,
    pub trim_slices: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            downsample: 1,
            trim_slices: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSection {
    /// `[h, w]`; half the slice size when absent.
    pub size: Option<[usize; 2]>,
    pub mode: PatchMode,
}

impl Default for PatchSection {
    fn default() -> Self {
        Self {
            size: None,
            mode: PatchMode::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_steps: Option<usize>,
    pub loss: LossMode,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            max_steps: d.max_steps,
            loss: d.loss_mode,
            eval_every: d.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub t_test: usize,
    pub baseline: Baseline,
    pub median_kernel: usize,
    pub erosion_iters: usize,
    pub min_component: usize,
    pub threshold_candidates: usize,
    /// Write per-subject anomaly maps and error-map figures.
    pub write_maps: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            t_test: 500,
            baseline: Baseline::Pddpm,
            median_kernel: MEDIAN_KERNEL,
            erosion_iters: EROSION_ITERATIONS,
            min_component: MIN_COMPONENT,
            threshold_candidates: THRESHOLD_CANDIDATES,
            write_maps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub patch_sizes: Vec<usize>,
    pub t_tests: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            patch_sizes: vec![16, 32, 48, 64, 80, 96],
            t_tests: (1..=9).map(|i| i * 100).collect(),
        }
    }
}

/// Synthetic dataset layout for the `phantoms` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    /// `[D, H, W]`.
    pub size: [usize; 3],
    pub train: usize,
    pub val_healthy: usize,
    pub val_unhealthy: usize,
    pub test: usize,
    pub test_healthy: usize,
    pub anomaly: AnomalyConfig,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            size: [8, 64, 64],
            train: 64,
            val_healthy: 4,
            val_unhealthy: 8,
            test: 16,
            test_healthy: 4,
            anomaly: AnomalyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub schedule: ScheduleConfig,
    pub noise: NoiseConfig,
    pub patching: PatchSection,
    pub denoiser: DenoiserConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub phantoms: PhantomSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            schedule: ScheduleConfig::default(),
            noise: NoiseConfig::default(),
            patching: PatchSection::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            phantoms: PhantomSection::default(),
        }
    }
}

/// Flags shared by every command; each overrides the matching config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Square patch edge length.
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    #[arg(long, global = true, value_parser = parse_patch_mode)]
    pub patch_mode: Option<PatchMode>,
    #[arg(long, global = true)]
    pub t_test: Option<usize>,
    #[arg(long, global = true, value_parser = parse_noise)]
    pub noise: Option<NoiseKind>,
    #[arg(long, global = true, value_parser = parse_loss)]
    pub loss: Option<LossMode>,
    #[arg(long, global = true, value_enum)]
    pub baseline: Option<Baseline>,
    /// Dataset manifest.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, global = true, env = "PDDPM_OUT", default_value = "runs")]
    pub out: PathBuf,
}

fn parse_patch_mode(s: &str) -> Result<PatchMode, String> {
    s.parse().map_err(|e: pddpm::Error| e.to_string())
}

fn parse_noise(s: &str) -> Result<NoiseKind, String> {
    s.parse().map_err(|e: pddpm::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: pddpm::Error| e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve(overrides: &Overrides) -> Result<Self> {
        let mut config = match &overrides.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(size) = overrides.patch_size {
            config.patching.size = Some([size, size]);
        }
        if let Some(mode) = overrides.patch_mode {
            config.patching.mode = mode;
        }
        if let Some(t) = overrides.t_test {
            config.eval.t_test = t;
        }
        if let Some(kind) = overrides.noise {
            config.noise.kind = kind;
        }
        if let Some(loss) = overrides.loss {
            config.train.loss = loss;
        }
        if let Some(baseline) = overrides.baseline {
            config.eval.baseline = baseline;
        }
        if let Some(data) = &overrides.data {
            config.data.manifest = Some(data.clone());
        }
        // The DDPM baseline is the full-image special case.
        if config.eval.baseline == Baseline::Ddpm {
            config.patching.mode = PatchMode::FullImage;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.train_config().validate()?;
        if self.eval.median_kernel % 2 == 0 {
            bail!("median kernel must be odd, got {}", self.eval.median_kernel);
        }
        if self.eval.threshold_candidates == 0 {
            bail!("need at least one threshold candidate");
        }
        Ok(())
    }

    /// Noise configuration with the run seed folded in.
    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            seed: pddpm::noise::mix_seed(self.seed, self.noise.seed),
            ..self.noise
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            max_steps: self.train.max_steps,
            schedule: self.schedule,
            t_test: self.eval.t_test,
            noise: self.noise_config(),
            patch_mode: self.patching.mode,
            patch_size: self.patching.size.map(|[h, w]| (h, w)),
            loss_mode: self.train.loss,
            seed: self.seed,
            eval_every: self.train.eval_every,
        }
    }

    /// Inference grid for slices of `image` size.
    pub fn grid(&self, image: (usize, usize)) -> Result<PatchGrid> {
        Ok(self.train_config().grid_for(image)?)
    }

    pub fn manifest(&self) -> Result<&Path> {
        let path = self
            .data
            .manifest
            .as_deref()
            .context("no dataset manifest given (use --data or data.manifest)")?;
        if !path.is_file() {
            bail!("dataset manifest {} does not exist", path.display());
        }
        Ok(path)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Short stable digest of the resolved configuration.
    pub fn digest(&self) -> Result<String> {
        let hash = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hash.iter().take(4).map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
        assert_eq!(config.digest().unwrap(), back.digest().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rat = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
        let partial: RunConfig = toml::from_str("seed = 4\n[eval]\nt_test = 300\n").unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.eval.t_test, 300);
        assert_eq!(partial.train, TrainSection::default());
    }

    #[test]
    fn overrides_apply() {
        let overrides = Overrides {
            seed: Some(9),
            patch_size: Some(16),
            t_test: Some(200),
            noise: Some(NoiseKind::Gaussian),
            baseline: Some(Baseline::Ddpm),
            ..Overrides::default()
        };
        let config = RunConfig::resolve(&overrides).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.patching.size, Some([16, 16]));
        assert_eq!(config.patching.mode, PatchMode::FullImage);
        assert_eq!(config.train_config().effective_loss(), LossMode::Rec);
        assert_eq!(config.noise.kind, NoiseKind::Gaussian);
        let bad = Overrides {
            t_test: Some(5000),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(&bad).is_err());
    }
}
