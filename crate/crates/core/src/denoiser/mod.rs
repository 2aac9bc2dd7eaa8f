//! The time-conditioned denoising Unet, its training losses, the Adam
//! optimizer and checkpoint I/O.

mod checkpoint;
pub mod layers;
mod optim;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{Adam, AdamConfig};
pub use unet::{time_embedding, DenoiserConfig, Unet, UnetCache};

use ndarray::{Array4, ArrayView, ArrayView3, Axis, Dimension};

use crate::error::{ensure_same_shape, Error, Result};
use crate::patching::BinaryMask;
use crate::tensor::{Real, SliceBatch, SliceTensor};

/// The trained model used by the pipeline.
pub type DenoiserModel = Unet<f32>;

/// Anything that maps a (partly) noised batch and timesteps to clean estimates.
pub trait Denoiser {
    /// `batch` is `(N, C, H, W)`; `timesteps` has one entry per item.
    fn denoise_batch(&self, batch: &SliceBatch, timesteps: &[usize]) -> Result<SliceBatch>;

    /// Single-slice convenience wrapper.
    fn denoise(&self, x_tilde: &SliceTensor, t: usize) -> Result<SliceTensor> {
        let batch = x_tilde.clone().insert_axis(Axis(0));
        let out = self.denoise_batch(&batch, &[t])?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Whether the model has been fitted; inference refuses untrained models.
    fn is_trained(&self) -> bool {
        true
    }
}

impl Denoiser for Unet<f32> {
    fn denoise_batch(&self, batch: &SliceBatch, timesteps: &[usize]) -> Result<SliceBatch> {
        self.predict(batch, timesteps)
    }

    fn is_trained(&self) -> bool {
        self.training_steps > 0
    }
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn denoise_batch(&self, batch: &SliceBatch, timesteps: &[usize]) -> Result<SliceBatch> {
        (**self).denoise_batch(batch, timesteps)
    }

    fn is_trained(&self) -> bool {
        (**self).is_trained()
    }
}

/// Mean absolute error over all elements.
pub fn loss_rec<F: Real, D: Dimension>(x0: ArrayView<F, D>, rec: ArrayView<F, D>) -> Result<f64> {
    ensure_same_shape(x0.shape(), rec.shape())?;
    if x0.is_empty() {
        return Err(Error::param("loss of an empty tensor"));
    }
    let total: f64 = x0
        .iter()
        .zip(rec.iter())
        .map(|(&a, &b)| (a - b).abs().as_f64())
        .sum();
    Ok(total / x0.len() as f64)
}

/// Mean absolute error over the masked elements only.
pub fn loss_patch(x0: ArrayView3<f32>, rec: ArrayView3<f32>, mask: &BinaryMask) -> Result<f64> {
    ensure_same_shape(x0.shape(), rec.shape())?;
    ensure_same_shape(x0.shape(), mask.shape())?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::param("patch loss with an empty mask"));
    }
    let total: f64 = x0
        .iter()
        .zip(rec.iter())
        .zip(mask.values().iter())
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a - b).abs() as f64)
        .sum();
    Ok(total / count as f64)
}

/// Batch-mean of per-item (masked) L1 losses and its gradient w.r.t. `rec`.
///
/// Without masks this is the mean of [`loss_rec`] over items; with masks the
/// mean of [`loss_patch`].
pub fn batch_l1<F: Real>(
    x0: &Array4<F>,
    rec: &Array4<F>,
    masks: Option<&[BinaryMask]>,
) -> Result<(f64, Array4<F>)> {
    ensure_same_shape(x0.shape(), rec.shape())?;
    let n = x0.dim().0;
    if n == 0 {
        return Err(Error::param("empty batch"));
    }
    if let Some(m) = masks {
        if m.len() != n {
            return Err(Error::param(format!("{} masks for a batch of {n}", m.len())));
        }
    }
    let mut grad = Array4::<F>::zeros(x0.raw_dim());
    let mut total = 0.0;
    for i in 0..n {
        let a = x0.index_axis(Axis(0), i);
        let b = rec.index_axis(Axis(0), i);
        let mut g = grad.index_axis_mut(Axis(0), i);
        let (loss, count) = match masks {
            Some(m) => {
                let mask = &m[i];
                ensure_same_shape(a.shape(), mask.shape())?;
                let count = mask.count();
                if count == 0 {
                    return Err(Error::param("patch loss with an empty mask"));
                }
                let mut sum = 0.0;
                ndarray::Zip::from(&mut g)
                    .and(&a)
                    .and(&b)
                    .and(mask.values())
                    .for_each(|g, &a, &b, &m| {
                        if m {
                            sum += (a - b).abs().as_f64();
                            *g = (b - a).signum_or_zero();
                        }
                    });
                (sum / count as f64, count)
            }
            None => {
                let mut sum = 0.0;
                ndarray::Zip::from(&mut g).and(&a).and(&b).for_each(|g, &a, &b| {
                    sum += (a - b).abs().as_f64();
                    *g = (b - a).signum_or_zero();
                });
                (sum / a.len() as f64, a.len())
            }
        };
        total += loss;
        let scale = F::of(1.0 / (count as f64 * n as f64));
        g.mapv_inplace(|v| v * scale);
    }
    Ok((total / n as f64, grad))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<F: Real> SignumOrZero for F {
    fn signum_or_zero(self) -> Self {
        if self == F::zero() {
            F::zero()
        } else {
            self.signum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn time_embedding_cases() {
        let e = time_embedding(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(time_embedding(3.0, 7).is_err());
        assert_eq!(time_embedding(5.0, 6).unwrap(), time_embedding(5.0, 6).unwrap());
        // dim 4: frequencies 1 and 1/10000.
        let e = time_embedding(1.0, 4).unwrap();
        let want = [1f64.sin(), (1e-4f64).sin(), 1f64.cos(), (1e-4f64).cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_rec_cases() {
        let x = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i * 3 + j) as f32);
        assert_eq!(loss_rec(x.view(), x.view()).unwrap(), 0.0);
        let z = Array3::<f32>::zeros((1, 3, 3));
        let o = Array3::<f32>::ones((1, 3, 3));
        assert_eq!(loss_rec(z.view(), o.view()).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Array3::from_shape_simple_fn((2, 5, 5), || rng.random::<f32>());
        let b = Array3::from_shape_simple_fn((2, 5, 5), || rng.random::<f32>());
        let mut oracle = 0.0f64;
        for (p, q) in a.iter().zip(b.iter()) {
            oracle += ((p - q) as f64).abs();
        }
        oracle /= 50.0;
        assert!((loss_rec(a.view(), b.view()).unwrap() - oracle).abs() < 1e-12);
        assert!(loss_rec(a.view(), z.view()).is_err());
    }

    #[test]
    fn loss_patch_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array3::from_shape_simple_fn((1, 8, 8), || rng.random::<f32>());
        let b = Array3::from_shape_simple_fn((1, 8, 8), || rng.random::<f32>());
        let ones = BinaryMask::ones(1, (8, 8));
        assert_eq!(
            loss_patch(a.view(), b.view(), &ones).unwrap(),
            loss_rec(a.view(), b.view()).unwrap()
        );
        // Errors outside the mask are ignored.
        let mask = BinaryMask::rectangle(1, (8, 8), (0, 0), (4, 8)).unwrap();
        let mut c = a.clone();
        for i in 4..8 {
            for j in 0..8 {
                c[[0, i, j]] += 5.0;
            }
        }
        assert_eq!(loss_patch(a.view(), c.view(), &mask).unwrap(), 0.0);
        // Masked-mean oracle on the top half.
        let mut sum = 0.0f64;
        for i in 0..4 {
            for j in 0..8 {
                sum += ((a[[0, i, j]] - b[[0, i, j]]) as f64).abs();
            }
        }
        let got = loss_patch(a.view(), b.view(), &mask).unwrap();
        assert!((got - sum / 32.0).abs() < 1e-12);
        assert!(loss_patch(a.view(), b.view(), &ones.complement()).is_err());
    }

    #[test]
    fn batch_l1_matches_scalar_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array4::from_shape_simple_fn((3, 1, 6, 6), || rng.random::<f32>());
        let b = Array4::from_shape_simple_fn((3, 1, 6, 6), || rng.random::<f32>());
        let masks: Vec<_> = (0..3)
            .map(|k| BinaryMask::rectangle(1, (6, 6), (k, k), (3, 3)).unwrap())
            .collect();
        let (full, _) = batch_l1(&a, &b, None).unwrap();
        let (patch, grad) = batch_l1(&a, &b, Some(&masks)).unwrap();
        let mut want_full = 0.0;
        let mut want_patch = 0.0;
        for i in 0..3 {
            let (x, y) = (a.index_axis(Axis(0), i), b.index_axis(Axis(0), i));
            want_full += loss_rec(x, y).unwrap() / 3.0;
            want_patch += loss_patch(x, y, &masks[i]).unwrap() / 3.0;
        }
        assert!((full - want_full).abs() < 1e-12);
        assert!((patch - want_patch).abs() < 1e-12);
        // Gradient vanishes outside each mask.
        assert_eq!(grad[[0, 0, 5, 5]], 0.0);
        assert!(grad[[0, 0, 0, 0]].abs() > 0.0);
    }
}
