use ndarray::{s, Array3, Array4, Axis};

use super::VolumeTensor;
use crate::error::{Error, Result};

/// Upper percentile used for intensity renormalization.
const UPPER_PERCENTILE: f64 = 99.5;

/// Average-pools all three spatial axes by `factor`, drops `trim_slices` slices
/// at each end of the depth axis and rescales intensities so the upper
/// in-mask percentile maps to 1, clipping to `[0, 1]`. Idempotent for
/// `factor == 1` and `trim_slices == 0`.
pub fn preprocess(volume: &VolumeTensor, factor: usize, trim_slices: usize) -> Result<VolumeTensor> {
    if factor == 0 {
        return Err(Error::param("downsampling factor must be at least 1"));
    }
    let (c, d, h, w) = volume.values.dim();
    let (dd, hh, ww) = (d / factor, h / factor, w / factor);
    if dd <= 2 * trim_slices || hh == 0 || ww == 0 {
        return Err(Error::param(format!(
            "volume {:?} too small for factor {factor} and trim {trim_slices}",
            (d, h, w)
        )));
    }

    let (values, mask) = if factor == 1 {
        (volume.values.clone(), volume.brain_mask.clone())
    } else {
        let n = (factor * factor * factor) as f32;
        let mut values = Array4::<f32>::zeros((c, dd, hh, ww));
        let mut coverage = Array3::<f32>::zeros((dd, hh, ww));
        for z in 0..dd {
            for y in 0..hh {
                for x in 0..ww {
                    let block = s![
                        z * factor..(z + 1) * factor,
                        y * factor..(y + 1) * factor,
                        x * factor..(x + 1) * factor
                    ];
                    for ch in 0..c {
                        values[[ch, z, y, x]] =
                            volume.values.index_axis(Axis(0), ch).slice(block).sum() / n;
                    }
                    coverage[[z, y, x]] =
                        volume.brain_mask.slice(block).iter().filter(|m| **m).count() as f32 / n;
                }
            }
        }
        (values, coverage.mapv(|f| f >= 0.5))
    };

    let keep = trim_slices..dd - trim_slices;
    let mut values = values.slice(s![.., keep.clone(), .., ..]).to_owned();
    let mask = mask.slice(s![keep, .., ..]).to_owned();

    for mut channel in values.outer_iter_mut() {
        let mut inside: Vec<f32> = channel
            .iter()
            .zip(mask.iter())
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .collect();
        let scale = if inside.is_empty() {
            0.0
        } else {
            let rank = ((UPPER_PERCENTILE / 100.0 * inside.len() as f64).ceil() as usize).max(1) - 1;
            let (_, p, _) = inside.select_nth_unstable_by(rank, f32::total_cmp);
            *p
        };
        let scale = if scale > 0.0 { scale } else { 1.0 };
        channel.mapv_inplace(|v| (v / scale).clamp(0.0, 1.0));
    }

    let spacing = volume.spacing.map(|s| s * factor as f32);
    let mut out = VolumeTensor::new(values, mask, volume.subject_id.clone())?;
    out.spacing = spacing;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;

    #[test]
    fn reference_geometry() {
        // (H, W, D) = (192, 192, 160) in our (D, H, W) order.
        let values = Array4::from_elem((1, 160, 192, 192), 0.5f32);
        let v = VolumeTensor::from_values(values, "big");
        let out = preprocess(&v, 2, 15).unwrap();
        assert_eq!(out.values.dim(), (1, 50, 96, 96));
        assert!(out.values.iter().all(|v| *v == 1.0));
        assert_eq!(out.spacing, [2.0; 3]);
    }

    #[test]
    fn idempotent_at_unit_factor() {
        let v = generate_phantom(4, (8, 64, 64)).unwrap();
        let once = preprocess(&v, 1, 0).unwrap();
        let twice = preprocess(&once, 1, 0).unwrap();
        assert_eq!(once, twice);
        assert!(once.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pooling_averages_blocks() {
        let mut values = Array4::<f32>::zeros((1, 4, 4, 4));
        values[[0, 0, 0, 0]] = 8.0;
        values[[0, 3, 3, 3]] = 4.0;
        let v = VolumeTensor::from_values(values, "p");
        let out = preprocess(&v, 2, 0).unwrap();
        // Block means 1.0 and 0.5; masks from majority vote are all empty so
        // no rescaling happens.
        assert_eq!(out.values[[0, 0, 0, 0]], 1.0);
        assert_eq!(out.values[[0, 1, 1, 1]], 0.5);
        assert!(out.brain_mask.iter().all(|m| !m));
    }

    #[test]
    fn rejects_overtrimming() {
        let v = generate_phantom(4, (8, 64, 64)).unwrap();
        assert!(preprocess(&v, 1, 4).is_err());
        assert!(preprocess(&v, 0, 0).is_err());
    }
}
