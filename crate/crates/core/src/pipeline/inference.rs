//! Sliding-patch reconstruction at a fixed test timestep.

use ndarray::{Array4, Axis, Ix3};

use crate::data::VolumeTensor;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::noise::{mix_seed, NoiseConfig};
use crate::patching::{apply_patch_noise, extract_patch, stitch, PatchGrid};
use crate::schedules::NoiseSchedule;
use crate::tensor::SliceTensor;

/// Noise configuration for slice `index` of a volume.
pub fn slice_noise(noise: &NoiseConfig, index: usize) -> NoiseConfig {
    NoiseConfig {
        seed: mix_seed(noise.seed, index as u64),
        ..*noise
    }
}

fn check_model<M: Denoiser + ?Sized>(model: &M) -> Result<()> {
    if model.is_trained() {
        Ok(())
    } else {
        Err(Error::param("model has not been trained"))
    }
}

fn field(noise: &NoiseConfig, shape: &[usize], stream: u64) -> Result<SliceTensor> {
    Ok(noise
        .sample_with_seed(shape, mix_seed(noise.seed, stream))?
        .into_dimensionality::<Ix3>()
        .expect("3D noise"))
}

/// For every grid patch, noises that patch alone (fresh field per patch) to
/// `t_test`, estimates the clean slice, and keeps the patch region of the
/// estimate; the kept regions are stitched with overlap averaging.
pub fn reconstruct_slice<M: Denoiser + ?Sized>(
    model: &M,
    x0: &SliceTensor,
    grid: &PatchGrid,
    t_test: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseConfig,
) -> Result<SliceTensor> {
    check_model(model)?;
    let (c, h, w) = x0.dim();
    if grid.image_size() != (h, w) {
        return Err(Error::param(format!(
            "grid for {:?} applied to a {h}x{w} slice",
            grid.image_size()
        )));
    }
    let k_count = grid.len();
    let mut batch = Array4::zeros((k_count, c, h, w));
    for k in 0..k_count {
        let eps = field(noise, x0.shape(), k as u64)?;
        let x_t = schedule.forward_noise(x0.view(), t_test, eps.view())?;
        let tilde = apply_patch_noise(x0.view(), x_t.view(), &grid.mask(k, c)?)?;
        batch.index_axis_mut(Axis(0), k).assign(&tilde);
    }
    let estimates = model.denoise_batch(&batch, &vec![t_test; k_count])?;
    let patches: Vec<_> = grid
        .positions()
        .iter()
        .enumerate()
        .map(|(k, &pos)| (extract_patch(estimates.index_axis(Axis(0), k), pos, grid.patch_size()), pos))
        .collect();
    stitch(&patches, grid)
}

/// Single-pass DDPM reconstruction: the whole slice is noised to `t_test`
/// and denoised once. Uses the same noise stream as the first patch of
/// [`reconstruct_slice`].
pub fn ddpm_reconstruct_slice<M: Denoiser + ?Sized>(
    model: &M,
    x0: &SliceTensor,
    t_test: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseConfig,
) -> Result<SliceTensor> {
    check_model(model)?;
    let eps = field(noise, x0.shape(), 0)?;
    let x_t = schedule.forward_noise(x0.view(), t_test, eps.view())?;
    model.denoise(&x_t, t_test)
}

/// Reconstructs every slice independently and reassembles them in order.
pub fn reconstruct_volume<M: Denoiser + ?Sized>(
    model: &M,
    volume: &VolumeTensor,
    grid: &PatchGrid,
    t_test: usize,
    schedule: &NoiseSchedule,
    noise: &NoiseConfig,
) -> Result<VolumeTensor> {
    let slices = (0..volume.depth())
        .map(|d| {
            reconstruct_slice(model, &volume.slice(d), grid, t_test, schedule, &slice_noise(noise, d)).map_err(
                |e| Error::Slice {
                    index: d,
                    source: Box::new(e),
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    VolumeTensor::from_slices(&slices, volume)
}
