//! Gaussian and structured (multi-octave simplex) noise fields.
//!
//! Simplex fields are standardized to zero mean and unit variance so either
//! kind can stand in for the unit Gaussian in the forward process.

mod simplex;

pub use simplex::Simplex2;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    Simplex,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "simplex" => Ok(NoiseKind::Simplex),
            other => Err(Error::param(format!("unknown noise kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub octaves: u32,
    /// Amplitude ratio between successive octaves.
    pub persistence: f64,
    /// Lowest octave frequency, in cycles per image width.
    pub base_frequency: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Simplex,
            octaves: 6,
            persistence: 0.8,
            base_frequency: 4.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn gaussian(seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.octaves < 1 {
            return Err(Error::param("noise needs at least one octave"));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(Error::param(format!(
                "persistence {} outside (0, 1]",
                self.persistence
            )));
        }
        if !(self.base_frequency >= 1.0 && self.base_frequency.is_finite()) {
            return Err(Error::param(format!(
                "base frequency {} below 1",
                self.base_frequency
            )));
        }
        Ok(())
    }

    /// Draws a field of the configured kind using `seed` instead of `self.seed`.
    pub fn sample_with_seed(&self, shape: &[usize], seed: u64) -> Result<ArrayD<f32>> {
        match self.kind {
            NoiseKind::Gaussian => sample_gaussian(shape, seed),
            NoiseKind::Simplex => sample_simplex(shape, &NoiseConfig { seed, ..*self }),
        }
    }

    pub fn sample(&self, shape: &[usize]) -> Result<ArrayD<f32>> {
        self.sample_with_seed(shape, self.seed)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        Err(Error::param(format!("empty noise shape {shape:?}")))
    } else {
        Ok(())
    }
}

/// I.i.d. standard normal values, deterministic per seed.
pub fn sample_gaussian(shape: &[usize], seed: u64) -> Result<ArrayD<f32>> {
    check_shape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        rng.sample::<f32, _>(StandardNormal)
    }))
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Multi-octave simplex noise, standardized per 2D field.
///
/// The last two axes of `shape` are `(H, W)`; every leading index (channel,
/// batch item, ...) gets an independent field.
pub fn sample_simplex(shape: &[usize], config: &NoiseConfig) -> Result<ArrayD<f32>> {
    check_shape(shape)?;
    config.validate()?;
    if config.kind != NoiseKind::Simplex {
        return Err(Error::param("sample_simplex needs a simplex noise config"));
    }
    if shape.len() < 2 {
        return Err(Error::param("simplex noise needs at least (H, W) axes"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h * w < 2 {
        return Err(Error::param("a 1-pixel field cannot be standardized"));
    }
    let fields: usize = shape[..shape.len() - 2].iter().product();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[fields, h, w]));
    let mut buf = vec![0.0f64; h * w];
    for (f, mut field) in out.axis_iter_mut(Axis(0)).enumerate() {
        octave_sum(&mut buf, h, w, config, mix_seed(config.seed, f as u64));
        let n = buf.len() as f64;
        let mean = buf.iter().sum::<f64>() / n;
        let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(Error::param("degenerate simplex field"));
        }
        let inv = 1.0 / var.sqrt();
        for (dst, v) in field.iter_mut().zip(&buf) {
            *dst = ((v - mean) * inv) as f32;
        }
    }
    Ok(out.into_shape_with_order(IxDyn(shape)).expect("same element count"))
}

fn octave_sum(buf: &mut [f64], h: usize, w: usize, config: &NoiseConfig, seed: u64) {
    buf.iter_mut().for_each(|v| *v = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut amplitude = 1.0;
    let mut frequency = config.base_frequency;
    for _ in 0..config.octaves {
        let noise = Simplex2::new(rng.random());
        // Random lattice offsets decorrelate octaves sharing the origin.
        let ox: f64 = rng.random_range(0.0..256.0);
        let oy: f64 = rng.random_range(0.0..256.0);
        let step = frequency / w as f64;
        for r in 0..h {
            let y = oy + r as f64 * step;
            let row = &mut buf[r * w..(r + 1) * w];
            for (c, v) in row.iter_mut().enumerate() {
                *v += amplitude * noise.sample(ox + c as f64 * step, y);
            }
        }
        amplitude *= config.persistence;
        frequency *= 2.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(a: &ArrayD<f32>) -> (f64, f64) {
        let n = a.len() as f64;
        let mean = a.iter().map(|v| *v as f64).sum::<f64>() / n;
        let var = a.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = sample_gaussian(&[1, 8, 8], 5).unwrap();
        let b = sample_gaussian(&[1, 8, 8], 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_pooled_moments() {
        let mut all = Vec::new();
        for seed in 0..100 {
            all.extend(sample_gaussian(&[1, 64, 64], seed).unwrap().into_iter());
        }
        let pooled = ArrayD::from_shape_vec(IxDyn(&[all.len()]), all).unwrap();
        let (mean, var) = moments(&pooled);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn gaussian_seeds_differ() {
        let a = sample_gaussian(&[1, 64, 64], 1).unwrap();
        let b = sample_gaussian(&[1, 64, 64], 2).unwrap();
        let same = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
        assert!((same as f64) < 0.01 * a.len() as f64);
    }

    #[test]
    fn empty_shapes_rejected() {
        assert!(sample_gaussian(&[], 1).is_err());
        assert!(sample_gaussian(&[1, 0, 4], 1).is_err());
        assert!(sample_simplex(&[1, 0, 4], &NoiseConfig::default()).is_err());
    }

    #[test]
    fn simplex_standardized_per_field() {
        let cfg = NoiseConfig {
            seed: 11,
            ..NoiseConfig::default()
        };
        let field = sample_simplex(&[3, 48, 40], &cfg).unwrap();
        assert_eq!(field.shape(), &[3, 48, 40]);
        for c in field.axis_iter(Axis(0)) {
            let (mean, var) = moments(&c.to_owned().into_dyn());
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
        // Channels are independent fields.
        assert_ne!(field.index_axis(Axis(0), 0), field.index_axis(Axis(0), 1));
        assert_eq!(field, sample_simplex(&[3, 48, 40], &cfg).unwrap());
    }

    #[test]
    fn simplex_config_validation() {
        let bad = [
            NoiseConfig { octaves: 0, ..NoiseConfig::default() },
            NoiseConfig { persistence: 0.0, ..NoiseConfig::default() },
            NoiseConfig { persistence: 1.5, ..NoiseConfig::default() },
            NoiseConfig { base_frequency: 0.5, ..NoiseConfig::default() },
            NoiseConfig::gaussian(0),
        ];
        for cfg in bad {
            assert!(sample_simplex(&[1, 8, 8], &cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn config_round_trip_reproduces_field() {
        let cfg = NoiseConfig {
            octaves: 3,
            persistence: 0.5,
            base_frequency: 2.0,
            seed: 77,
            ..NoiseConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: NoiseConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.sample(&[1, 16, 16]).unwrap(), cfg.sample(&[1, 16, 16]).unwrap());
    }
}
