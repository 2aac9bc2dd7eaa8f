//! Patch-masked diffusion training with healthy-validation model selection.

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{batch_l1, Adam, AdamConfig, Checkpoint, DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::noise::{mix_seed, NoiseConfig};
use crate::patching::{apply_patch_noise, BinaryMask, PatchGrid, PatchMode};
use crate::schedules::{NoiseSchedule, ScheduleConfig};
use crate::tensor::SliceTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// L1 over the whole image.
    Rec,
    /// L1 over the noised patch only.
    Patch,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rec" => Ok(LossMode::Rec),
            "patch" => Ok(LossMode::Patch),
            other => Err(Error::param(format!("unknown loss mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Overrides `max_epochs` when set.
    pub max_steps: Option<usize>,
    pub schedule: ScheduleConfig,
    pub t_test: usize,
    pub noise: NoiseConfig,
    pub patch_mode: PatchMode,
    /// `(h, w)`; half the image size when unset.
    pub patch_size: Option<(usize, usize)>,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Healthy-validation interval in steps (0 disables intermediate checks).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 32,
            max_epochs: 1600,
            max_steps: None,
            schedule: ScheduleConfig::default(),
            t_test: 500,
            noise: NoiseConfig::default(),
            patch_mode: PatchMode::Fixed,
            patch_size: None,
            loss_mode: LossMode::Patch,
            seed: 0,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        if self.t_test < 1 || self.t_test > self.schedule.steps {
            return Err(Error::param(format!(
                "t_test {} outside [1, {}]",
                self.t_test, self.schedule.steps
            )));
        }
        self.noise.validate()
    }

    /// Full-image training always uses the whole-image loss.
    pub fn effective_loss(&self) -> LossMode {
        match self.patch_mode {
            PatchMode::FullImage => LossMode::Rec,
            _ => self.loss_mode,
        }
    }

    pub fn patch_size_for(&self, image: (usize, usize)) -> (usize, usize) {
        self.patch_size.unwrap_or((image.0.div_ceil(2), image.1.div_ceil(2)))
    }

    /// Grid used for fixed-mode sampling and inference.
    pub fn grid_for(&self, image: (usize, usize)) -> Result<PatchGrid> {
        match self.patch_mode {
            PatchMode::FullImage => PatchGrid::full(image.0, image.1),
            _ => {
                let (h, w) = self.patch_size_for(image);
                PatchGrid::new(image.0, image.1, h, w)
            }
        }
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.max_steps
            .unwrap_or(self.max_epochs * dataset_len.div_ceil(self.batch_size))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

/// Randomness drawn for one training batch, in draw order.
struct StepDraws {
    indices: Vec<usize>,
    timesteps: Vec<usize>,
    noise_seed: u64,
    rng: ChaCha8Rng,
}

/// Every step has its own generator so a resumed run continues the exact
/// trajectory of an uninterrupted one.
fn step_draws(seed: u64, step: usize, dataset_len: usize, batch: usize, steps: usize) -> StepDraws {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step as u64));
    let indices = (0..batch).map(|_| rng.random_range(0..dataset_len)).collect();
    let timesteps = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
    let noise_seed = rng.random();
    StepDraws {
        indices,
        timesteps,
        noise_seed,
        rng,
    }
}

pub(crate) fn stack(slices: &[&SliceTensor]) -> Result<Array4<f32>> {
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::param(format!("inconsistent slice shapes: {e}")))
}

pub(crate) fn check_dataset(data: &[SliceTensor]) -> Result<(usize, usize, usize)> {
    let first = data.first().ok_or_else(|| Error::param("empty training set"))?;
    let dim = first.dim();
    if let Some(bad) = data.iter().find(|s| s.dim() != dim) {
        return Err(Error::Shape {
            expected: first.shape().to_vec(),
            actual: bad.shape().to_vec(),
        });
    }
    Ok(dim)
}

/// Patch-masked noising of one batch: returns the model input, the masks (one
/// per item) and the clean targets.
fn noised_batch(
    x0: &Array4<f32>,
    timesteps: &[usize],
    noise: &NoiseConfig,
    noise_seed: u64,
    schedule: &NoiseSchedule,
    mode: PatchMode,
    grid: &PatchGrid,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f32>, Vec<BinaryMask>)> {
    let (n, c, h, w) = x0.dim();
    let eps = noise
        .sample_with_seed(&[n, c, h, w], noise_seed)?
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4D noise");
    let mut input = Array4::zeros(x0.raw_dim());
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let clean = x0.index_axis(Axis(0), i);
        let x_t = schedule.forward_noise(clean, timesteps[i], eps.index_axis(Axis(0), i))?;
        let mask = match mode {
            PatchMode::FullImage => BinaryMask::ones(c, (h, w)),
            PatchMode::Fixed => grid.mask(rng.random_range(0..grid.len()), c)?,
            PatchMode::Random => {
                let pos = grid.random_position(rng);
                BinaryMask::rectangle(c, (h, w), pos, grid.patch_size())?
            }
        };
        let tilde = apply_patch_noise(clean, x_t.view(), &mask)?;
        input.index_axis_mut(Axis(0), i).assign(&tilde);
        masks.push(mask);
    }
    Ok((input, masks))
}

/// Step-by-step trainer holding the model, optimizer and step counter.
pub struct Trainer<'a> {
    config: TrainConfig,
    schedule: NoiseSchedule,
    grid: PatchGrid,
    data: &'a [SliceTensor],
    model: DenoiserModel,
    optimizer: Adam<f32>,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a [SliceTensor], config: TrainConfig, denoiser: DenoiserConfig) -> Result<Self> {
        let model = DenoiserModel::new(denoiser)?;
        let optimizer = Adam::new(
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
            &model,
        );
        Self::with_state(data, config, model, optimizer)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(data: &'a [SliceTensor], config: TrainConfig, checkpoint: Checkpoint<f32>) -> Result<Self> {
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        Self::with_state(data, config, checkpoint.model, optimizer)
    }

    fn with_state(
        data: &'a [SliceTensor],
        config: TrainConfig,
        model: DenoiserModel,
        optimizer: Adam<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = check_dataset(data)?;
        model.check_input(&[1, c, h, w], 1)?;
        let schedule = config.schedule.build()?;
        let grid = config.grid_for((h, w))?;
        let step = optimizer.steps() as usize;
        Ok(Self {
            config,
            schedule,
            grid,
            data,
            model,
            optimizer,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam<f32> {
        &self.optimizer
    }

    pub fn into_model(self) -> DenoiserModel {
        self.model
    }

    /// Completed steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.data.len())
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let cfg = &self.config;
        let mut draws = step_draws(cfg.seed, self.step, self.data.len(), cfg.batch_size, self.schedule.steps());
        let items: Vec<&SliceTensor> = draws.indices.iter().map(|&i| &self.data[i]).collect();
        let x0 = stack(&items)?;
        let (input, masks) = noised_batch(
            &x0,
            &draws.timesteps,
            &cfg.noise,
            draws.noise_seed,
            &self.schedule,
            cfg.patch_mode,
            &self.grid,
            &mut draws.rng,
        )?;
        let (rec, cache) = self.model.forward(&input, &draws.timesteps)?;
        let masks = match cfg.effective_loss() {
            LossMode::Rec => None,
            LossMode::Patch => Some(masks.as_slice()),
        };
        let (loss, grad) = batch_l1(&x0, &rec, masks)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: self.step, loss });
        }
        self.model.zero_grad();
        self.model.backward(cache, &grad);
        self.optimizer.step(&mut self.model);
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining steps, checking the healthy validation loss every
    /// `eval_every` steps and at the end; keeps the best-scoring model.
    pub fn fit(&mut self, val: &[SliceTensor], mut observe: impl FnMut(&TrainRecord)) -> Result<TrainOutcome> {
        let total = self.total_steps();
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, DenoiserModel)> = None;
        while self.step < total {
            let loss = self.step()?;
            let due = self.step == total || (self.config.eval_every > 0 && self.step % self.config.eval_every == 0);
            let val_loss = if due && !val.is_empty() {
                let v = validation_loss(&self.model, val, &self.config)?;
                if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                    best = Some((v, self.step, self.model.clone()));
                }
                Some(v)
            } else {
                None
            };
            let record = TrainRecord {
                step: self.step,
                loss,
                val_loss,
            };
            observe(&record);
            history.push(record);
        }
        let (best_val_loss, best_step, best_model) = match best {
            Some((v, s, m)) => (Some(v), s, m),
            None => (None, self.step, self.model.clone()),
        };
        Ok(TrainOutcome {
            model: best_model,
            best_step,
            best_val_loss,
            history,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The checkpoint with the lowest healthy validation loss (the final model
    /// when no validation data was given).
    pub model: DenoiserModel,
    pub best_step: usize,
    pub best_val_loss: Option<f64>,
    pub history: Vec<TrainRecord>,
}

/// Trains from scratch on healthy slices.
pub fn train(
    data: &[SliceTensor],
    val: &[SliceTensor],
    config: &TrainConfig,
    denoiser: DenoiserConfig,
) -> Result<TrainOutcome> {
    Trainer::new(data, config.clone(), denoiser)?.fit(val, |_| {})
}

/// Training objective on held-out healthy slices with fixed per-slice
/// randomness, so scores are comparable across checkpoints.
pub fn validation_loss(model: &DenoiserModel, val: &[SliceTensor], config: &TrainConfig) -> Result<f64> {
    let (c, h, w) = check_dataset(val)?;
    let schedule = config.schedule.build()?;
    let grid = config.grid_for((h, w))?;
    let val_seed = mix_seed(config.seed, u64::MAX);
    let mut total = 0.0;
    for (chunk_index, chunk) in val.chunks(config.batch_size).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(val_seed, chunk_index as u64));
        let timesteps: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=schedule.steps())).collect();
        let noise_seed = rng.random();
        let items: Vec<&SliceTensor> = chunk.iter().collect();
        let x0 = stack(&items)?;
        let (input, masks) = noised_batch(
            &x0,
            &timesteps,
            &config.noise,
            noise_seed,
            &schedule,
            config.patch_mode,
            &grid,
            &mut rng,
        )?;
        let rec = model.predict(&input, &timesteps)?;
        let masks = match config.effective_loss() {
            LossMode::Rec => None,
            LossMode::Patch => Some(masks.as_slice()),
        };
        let (loss, _) = batch_l1(&x0, &rec, masks)?;
        total += loss * chunk.len() as f64;
    }
    debug_assert_eq!(c, model.config().input_channels);
    Ok(total / val.len() as f64)
}

/// Plain DDPM: every step noises the whole image and scores the whole image.
/// Kept separate from [`Trainer`] as the reference the full-image mode is
/// checked against.
pub fn ddpm_train_step(
    model: &mut DenoiserModel,
    optimizer: &mut Adam<f32>,
    data: &[SliceTensor],
    config: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let schedule = config.schedule.build()?;
    let draws = step_draws(config.seed, step, data.len(), config.batch_size, schedule.steps());
    let items: Vec<&SliceTensor> = draws.indices.iter().map(|&i| &data[i]).collect();
    let x0 = stack(&items)?;
    let eps = config
        .noise
        .sample_with_seed(x0.shape(), draws.noise_seed)?
        .into_dimensionality::<ndarray::Ix4>()
        .expect("4D noise");
    let mut x_t = Array4::zeros(x0.raw_dim());
    for (i, &t) in draws.timesteps.iter().enumerate() {
        let noised = schedule.forward_noise(x0.index_axis(Axis(0), i), t, eps.index_axis(Axis(0), i))?;
        x_t.index_axis_mut(Axis(0), i).assign(&noised);
    }
    let (rec, cache) = model.forward(&x_t, &draws.timesteps)?;
    let (loss, grad) = batch_l1(&x0, &rec, None)?;
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    model.zero_grad();
    model.backward(cache, &grad);
    optimizer.step(model);
    Ok(loss)
}
