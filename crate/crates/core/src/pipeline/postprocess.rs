//! Anomaly maps, 3D median filtering, brain-mask erosion, connected
//! component pruning and the greedy threshold search.

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::VolumeTensor;
use crate::error::{ensure_same_shape, Error, Result};
use crate::metrics::dice;
use crate::tensor::BinaryVolume;

/// Voxel-wise anomaly scores `(D, H, W)` with the brain mask they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub values: Array3<f32>,
    pub brain_mask: BinaryVolume,
}

impl AnomalyMap {
    pub fn new(values: Array3<f32>, brain_mask: BinaryVolume) -> Result<Self> {
        ensure_same_shape(values.shape(), brain_mask.shape())?;
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::param("anomaly scores must be finite and nonnegative"));
        }
        Ok(Self { values, brain_mask })
    }

    fn in_mask_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.values
            .iter()
            .zip(self.brain_mask.iter())
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
    }
}

/// `|x0 - x_rec|`, averaged over channels.
pub fn anomaly_map(x0: &VolumeTensor, x_rec: &VolumeTensor) -> Result<AnomalyMap> {
    ensure_same_shape(x0.values.shape(), x_rec.values.shape())
        .map_err(|e| Error::param(format!("reconstruction does not match input: {e}")))?;
    let diff = (&x0.values - &x_rec.values).mapv(f32::abs);
    let values = diff.mean_axis(Axis(0)).ok_or_else(|| Error::param("volume without channels"))?;
    AnomalyMap::new(values, x0.brain_mask.clone())
}

/// Intensity thresholding baseline: the score is the (channel-mean) intensity.
pub fn baseline_thresh(x0: &VolumeTensor) -> Result<AnomalyMap> {
    AnomalyMap::new(x0.mean_channel().mapv(|v| v.max(0.0)), x0.brain_mask.clone())
}

/// 3D median over a `kernel`³ window; the volume is extended by replicating
/// its border voxels.
pub fn median_filter(values: &Array3<f32>, kernel: usize) -> Result<Array3<f32>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::param(format!("median kernel must be odd and positive, got {kernel}")));
    }
    let r = (kernel / 2) as isize;
    let (d, h, w) = values.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut window = Vec::with_capacity(kernel * kernel * kernel);
    let mut out = Array3::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dz in -r..=r {
                    let zz = clamp(z as isize + dz, d);
                    for dy in -r..=r {
                        let yy = clamp(y as isize + dy, h);
                        for dx in -r..=r {
                            window.push(values[[zz, yy, clamp(x as isize + dx, w)]]);
                        }
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, f32::total_cmp);
                out[[z, y, x]] = *m;
            }
        }
    }
    Ok(out)
}

/// Binary erosion with a 3×3×3 cube, repeated `iterations` times. Neighbors
/// outside the volume do not erode, so thin stacks of slices survive.
pub fn erode(mask: &BinaryVolume, iterations: usize) -> BinaryVolume {
    let (d, h, w) = mask.dim();
    let mut current = mask.clone();
    for _ in 0..iterations {
        let mut next = current.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !current[[z, y, x]] {
                        continue;
                    }
                    'nbr: for zz in z.saturating_sub(1)..(z + 2).min(d) {
                        for yy in y.saturating_sub(1)..(y + 2).min(h) {
                            for xx in x.saturating_sub(1)..(x + 2).min(w) {
                                if !current[[zz, yy, xx]] {
                                    next[[z, y, x]] = false;
                                    break 'nbr;
                                }
                            }
                        }
                    }
                }
            }
        }
        current = next;
    }
    current
}

/// Median-filters the scores, erodes the brain mask and zeroes everything
/// outside the eroded mask.
pub fn postprocess(map: &AnomalyMap, median_kernel: usize, erosion_iters: usize) -> Result<AnomalyMap> {
    let mut values = median_filter(&map.values, median_kernel)?;
    let brain_mask = erode(&map.brain_mask, erosion_iters);
    Zip::from(&mut values).and(&brain_mask).for_each(|v, &m| {
        if !m {
            *v = 0.0;
        }
    });
    Ok(AnomalyMap { values, brain_mask })
}

/// Sizes of 26-connected components and the component index of each voxel
/// (`usize::MAX` for background).
fn label_components(mask: &BinaryVolume) -> (Array3<usize>, Vec<usize>) {
    let (d, h, w) = mask.dim();
    let mut labels = Array3::from_elem((d, h, w), usize::MAX);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for (start, &on) in mask.indexed_iter() {
        if !on || labels[start] != usize::MAX {
            continue;
        }
        let label = sizes.len();
        let mut size = 0;
        labels[start] = label;
        stack.push(start);
        while let Some((z, y, x)) = stack.pop() {
            size += 1;
            for zz in z.saturating_sub(1)..(z + 2).min(d) {
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let idx = (zz, yy, xx);
                        if mask[idx] && labels[idx] == usize::MAX {
                            labels[idx] = label;
                            stack.push(idx);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Removes 26-connected components with fewer than `min_component` voxels.
pub fn prune_components(mask: &BinaryVolume, min_component: usize) -> BinaryVolume {
    if min_component <= 1 {
        return mask.clone();
    }
    let (labels, sizes) = label_components(mask);
    labels.mapv(|l| l != usize::MAX && sizes[l] >= min_component)
}

/// Voxels strictly above `threshold`, with small components removed.
pub fn binarize_and_prune(map: &AnomalyMap, threshold: f64, min_component: usize) -> Result<BinaryVolume> {
    if !threshold.is_finite() {
        return Err(Error::param("threshold must be finite"));
    }
    let binary = map.values.mapv(|v| v as f64 > threshold);
    Ok(prune_components(&binary, min_component))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub threshold: f64,
    pub dice: f64,
    /// Set when every ground truth was empty; `dice` is then reported as 0.
    pub empty_ground_truth: bool,
}

/// `n` evenly spaced quantiles (levels `0, 1/(n-1), ..., 1`) of the pooled
/// in-mask scores, deduplicated and ascending.
pub fn threshold_candidates(maps: &[AnomalyMap], n: usize) -> Vec<f64> {
    let mut pooled: Vec<f32> = maps.iter().flat_map(|m| m.in_mask_values()).collect();
    if pooled.is_empty() {
        return vec![0.0];
    }
    pooled.sort_unstable_by(f32::total_cmp);
    let last = pooled.len() - 1;
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let level = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            pooled[(level * last as f64).round() as usize] as f64
        })
        .collect();
    out.dedup();
    out
}

/// Mean Dice of the pruned binarizations at `threshold`.
pub fn mean_dice_at(
    maps: &[AnomalyMap],
    gts: &[BinaryVolume],
    threshold: f64,
    min_component: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (map, gt) in maps.iter().zip(gts) {
        total += dice(&binarize_and_prune(map, threshold, min_component)?, gt)?;
    }
    Ok(total / maps.len() as f64)
}

/// Picks the candidate threshold with the highest mean Dice; ties go to the
/// larger threshold.
pub fn greedy_threshold_search(
    maps: &[AnomalyMap],
    gts: &[BinaryVolume],
    n_candidates: usize,
    min_component: usize,
) -> Result<ThresholdSearch> {
    if maps.is_empty() || n_candidates == 0 {
        return Err(Error::param("threshold search needs maps and at least one candidate"));
    }
    if maps.len() != gts.len() {
        return Err(Error::param(format!("{} maps but {} ground truths", maps.len(), gts.len())));
    }
    for (m, g) in maps.iter().zip(gts) {
        ensure_same_shape(m.values.shape(), g.shape())?;
    }
    let candidates = threshold_candidates(maps, n_candidates);
    if gts.iter().all(|g| g.iter().all(|v| !v)) {
        return Ok(ThresholdSearch {
            threshold: *candidates.last().expect("nonempty"),
            dice: 0.0,
            empty_ground_truth: true,
        });
    }
    let mut best = ThresholdSearch {
        threshold: f64::NAN,
        dice: f64::NEG_INFINITY,
        empty_ground_truth: false,
    };
    for &threshold in &candidates {
        let score = mean_dice_at(maps, gts, threshold, min_component)?;
        // Candidates ascend, so >= keeps the larger threshold on ties.
        if score >= best.dice {
            best.threshold = threshold;
            best.dice = score;
        }
    }
    Ok(best)
}
