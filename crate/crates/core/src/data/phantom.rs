//! Synthetic brain-like phantoms and hyperintense anomaly injection.

use std::f64::consts::PI;

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VolumeTensor;
use crate::error::{Error, Result};
use crate::pipeline::erode;
use crate::tensor::BinaryVolume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// `(D, H, W)`.
    pub size: (usize, usize, usize),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { size: (8, 64, 64) }
    }
}

fn smoothstep(edge: f64, width: f64, x: f64) -> f64 {
    // 0 below edge - width, 1 above edge + width.
    let t = ((x - edge) / width).clamp(-1.0, 1.0);
    0.5 + 0.5 * (t * PI / 2.0).sin()
}

/// Elliptical "brain" with a bright gyrated rim, darker core, two
/// ventricle-like ellipses and smooth low-frequency shading. Background is
/// exactly zero; in-mask intensities lie in `[0.1, 0.7]`.
pub fn generate_phantom(seed: u64, size: (usize, usize, usize)) -> Result<VolumeTensor> {
    let (d, h, w) = size;
    if d < 4 || h < 32 || w < 32 {
        return Err(Error::param(format!(
            "phantom size {size:?} below the (4, 32, 32) minimum"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf, df) = (h as f64, w as f64, d as f64);
    let cy = hf / 2.0 + rng.random_range(-1.5..1.5);
    let cx = wf / 2.0 + rng.random_range(-1.5..1.5);
    let ay = hf * rng.random_range(0.38..0.44);
    let ax = wf * rng.random_range(0.32..0.38);
    let angle: f64 = rng.random_range(-0.15..0.15);
    let (sin_a, cos_a) = angle.sin_cos();
    let z_extent = df * rng.random_range(0.75..0.9);
    let rim_level = rng.random_range(0.55..0.62);
    let core_level = rng.random_range(0.35..0.42);
    let rim_width = rng.random_range(0.15..0.22);
    let gyri = rng.random_range(7..12) as f64;
    let gyri_phase = rng.random_range(0.0..2.0 * PI);
    let vent_offset = rng.random_range(0.16..0.24);
    let vent_size = (rng.random_range(0.10..0.14), rng.random_range(0.22..0.3));
    let vent_level = rng.random_range(0.16..0.22);
    let shading: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();

    let mut values = Array4::<f32>::zeros((1, d, h, w));
    let mut mask = Array3::from_elem((d, h, w), false);
    for z in 0..d {
        let zr = (z as f64 + 0.5 - df / 2.0) / z_extent;
        let scale = (1.0 - zr * zr).max(0.3).sqrt();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (cos_a * dx + sin_a * dy) / (ax * scale);
                let v = (-sin_a * dx + cos_a * dy) / (ay * scale);
                let r = (u * u + v * v).sqrt();
                if r > 1.0 {
                    continue;
                }
                let theta = v.atan2(u);
                let edge = 1.0 - rim_width + 0.04 * (gyri * theta + gyri_phase).sin();
                let rim = smoothstep(edge, 0.05, r);
                let mut val = core_level + (rim_level - core_level) * rim;
                for side in [-1.0, 1.0] {
                    let vu = (u - side * vent_offset) / vent_size.0;
                    let vv = (v + 0.05) / vent_size.1;
                    let vr = (vu * vu + vv * vv).sqrt();
                    let inside = 1.0 - smoothstep(1.0, 0.2, vr);
                    val += (vent_level - val) * inside;
                }
                let mut shade = 0.0;
                for &(fy, fx, fz, phase) in &shading {
                    shade += (PI * (fy * v + fx * u + fz * zr) + phase).cos();
                }
                val += 0.02 * shade;
                values[[0, z, y, x]] = val.clamp(0.1, 0.7) as f32;
                mask[[z, y, x]] = true;
            }
        }
    }
    let mut volume = VolumeTensor::new(values, mask, format!("phantom-{seed}"))?;
    volume.spacing = [1.0; 3];
    Ok(volume)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    pub count: usize,
    /// In-plane semi-axis range in voxels.
    pub radius_range: (f64, f64),
    /// Intensity added at full strength.
    pub contrast: f64,
    /// Minimum distance (in erosion steps) between a blob and the mask boundary.
    pub margin: usize,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            count: 1,
            radius_range: (4.0, 7.0),
            contrast: 0.3,
            margin: 4,
        }
    }
}

/// Intensity profile over normalized ellipsoid radius: flat core, Gaussian
/// roll-off with sigma = radius / 3 over the outer third, zero beyond the support.
fn blob_profile(r: f64) -> f64 {
    const SIGMA: f64 = 1.0 / 3.0;
    if r > 1.0 {
        0.0
    } else if r <= 1.0 - SIGMA {
        1.0
    } else {
        let e = r - (1.0 - SIGMA);
        (-e * e / (2.0 * SIGMA * SIGMA)).exp()
    }
}

/// Adds `config.count` hyperintense ellipsoids inside the brain mask and
/// returns the modified volume with the exact set of modified voxels.
pub fn inject_anomaly(
    phantom: &VolumeTensor,
    seed: u64,
    config: &AnomalyConfig,
) -> Result<(VolumeTensor, BinaryVolume)> {
    let (rmin, rmax) = config.radius_range;
    if !(rmin > 0.0 && rmin <= rmax) {
        return Err(Error::param(format!("bad radius range {:?}", config.radius_range)));
    }
    if !(config.contrast > 0.0) {
        return Err(Error::param("anomaly contrast must be positive"));
    }
    let (_, d, h, w) = phantom.values.dim();
    let allowed = erode(&phantom.brain_mask, config.margin);
    let mut strength = Array3::<f64>::zeros((d, h, w));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for blob in 0..config.count {
        let mut placed = false;
        for _ in 0..200 {
            let ry = rng.random_range(rmin..=rmax);
            let rx = rng.random_range(rmin..=rmax);
            let rz = (0.5 * (ry + rx) * rng.random_range(0.35..0.5)).clamp(1.5, d as f64 / 2.0);
            let cz = rng.random_range(0.0..d as f64);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let mut voxels = Vec::new();
            let mut fits = true;
            let z_range = ((cz - rz).floor().max(0.0) as usize)..=((cz + rz).ceil().min(d as f64 - 1.0) as usize);
            'scan: for z in z_range {
                for y in ((cy - ry).floor().max(0.0) as usize)..=((cy + ry).ceil().min(h as f64 - 1.0) as usize) {
                    for x in ((cx - rx).floor().max(0.0) as usize)..=((cx + rx).ceil().min(w as f64 - 1.0) as usize) {
                        let dz = (z as f64 + 0.5 - cz) / rz;
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        let dx = (x as f64 + 0.5 - cx) / rx;
                        let r = (dz * dz + dy * dy + dx * dx).sqrt();
                        if r <= 1.0 {
                            if !allowed[[z, y, x]] {
                                fits = false;
                                break 'scan;
                            }
                            voxels.push(((z, y, x), blob_profile(r)));
                        }
                    }
                }
            }
            // The blob must also stay inside the depth range.
            if cz - rz < 0.0 || cz + rz > d as f64 {
                fits = false;
            }
            if fits && !voxels.is_empty() {
                for (idx, p) in voxels {
                    strength[idx] = strength[idx].max(p);
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::param(format!(
                "could not place anomaly {blob} inside the brain mask of {}",
                phantom.subject_id
            )));
        }
    }
    let ground_truth = strength.mapv(|s| s > 0.0);
    let mut out = phantom.clone();
    for mut channel in out.values.outer_iter_mut() {
        ndarray::Zip::from(&mut channel).and(&strength).for_each(|v, &s| {
            if s > 0.0 {
                *v = (*v as f64 + config.contrast * s).min(1.0) as f32;
            }
        });
    }
    out.subject_id = format!("{}-anomaly-{seed}", phantom.subject_id);
    Ok((out, ground_truth))
}
