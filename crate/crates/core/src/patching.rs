//! Patch grids, binary patch masks, partial noising and overlap-averaged
//! stitching.

use ndarray::{s, Array2, Array3, ArrayView3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};

/// How training picks the noised patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Uniform top-left corner anywhere inside the image.
    Random,
    /// Uniform index into the fixed grid.
    Fixed,
    /// The whole image is noised (plain DDPM).
    FullImage,
}

impl std::str::FromStr for PatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PatchMode::Random),
            "fixed" => Ok(PatchMode::Fixed),
            "full_image" | "full-image" => Ok(PatchMode::FullImage),
            other => Err(Error::param(format!("unknown patch mode '{other}'"))),
        }
    }
}

/// Evenly spaced, boundary-anchored patch positions covering an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    image_size: (usize, usize),
    patch_size: (usize, usize),
    positions: Vec<(usize, usize)>,
}

/// `count` offsets from 0 to `span` inclusive, rounded to integers.
fn axis_offsets(image: usize, patch: usize) -> Vec<usize> {
    let span = image - patch;
    let count = span.div_ceil(patch) + 1;
    if count == 1 {
        return vec![0];
    }
    (0..count)
        .map(|i| ((i * span) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

impl PatchGrid {
    /// Cartesian grid with `ceil((H-h)/h) + 1` rows and `ceil((W-w)/w) + 1` columns.
    pub fn new(height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch_h == 0 || patch_w == 0 {
            return Err(Error::param("image and patch sizes must be positive"));
        }
        if patch_h > height || patch_w > width {
            return Err(Error::param(format!(
                "patch {patch_h}x{patch_w} larger than image {height}x{width}"
            )));
        }
        let rows = axis_offsets(height, patch_h);
        let cols = axis_offsets(width, patch_w);
        let positions = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(Self {
            image_size: (height, width),
            patch_size: (patch_h, patch_w),
            positions,
        })
    }

    /// A single patch spanning the whole image.
    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, height, width)
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn patch_size(&self) -> (usize, usize) {
        self.patch_size
    }

    /// Top-left `(row, col)` of every patch, row-major.
    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    /// Number of patches K.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_full_image(&self) -> bool {
        self.patch_size == self.image_size
    }

    /// Number of patches covering each pixel.
    pub fn coverage(&self) -> Array2<u32> {
        let (h, w) = self.patch_size;
        let mut count = Array2::zeros(self.image_size);
        for &(r, c) in &self.positions {
            count.slice_mut(s![r..r + h, c..c + w]).mapv_inplace(|v| v + 1);
        }
        count
    }

    /// Mask for the k-th grid patch.
    pub fn mask(&self, k: usize, channels: usize) -> Result<BinaryMask> {
        let &pos = self.positions.get(k).ok_or_else(|| {
            Error::param(format!("patch index {k} outside 0..{}", self.len()))
        })?;
        BinaryMask::rectangle(channels, self.image_size, pos, self.patch_size)
    }

    /// Uniformly random top-left corner with the grid's patch size.
    pub fn random_position<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let (h, w) = self.patch_size;
        let (hh, ww) = self.image_size;
        (rng.random_range(0..=hh - h), rng.random_range(0..=ww - w))
    }
}

/// `{0, 1}` mask of shape `(C, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array3<bool>,
}

impl BinaryMask {
    pub fn from_values(values: Array3<bool>) -> Self {
        Self { values }
    }

    pub fn ones(channels: usize, size: (usize, usize)) -> Self {
        Self {
            values: Array3::from_elem((channels, size.0, size.1), true),
        }
    }

    /// Ones on the `size` rectangle at `pos` in every channel.
    pub fn rectangle(
        channels: usize,
        image: (usize, usize),
        pos: (usize, usize),
        size: (usize, usize),
    ) -> Result<Self> {
        if pos.0 + size.0 > image.0 || pos.1 + size.1 > image.1 {
            return Err(Error::param(format!(
                "patch at {pos:?} of size {size:?} leaves image {image:?}"
            )));
        }
        let mut values = Array3::from_elem((channels, image.0, image.1), false);
        values
            .slice_mut(s![.., pos.0..pos.0 + size.0, pos.1..pos.1 + size.1])
            .fill(true);
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<bool> {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            values: self.values.mapv(|v| !v),
        }
    }
}

/// Partly noised image: `x_t` inside the mask, `x0` outside.
pub fn apply_patch_noise(
    x0: ArrayView3<f32>,
    x_t: ArrayView3<f32>,
    mask: &BinaryMask,
) -> Result<Array3<f32>> {
    ensure_same_shape(x0.shape(), x_t.shape())?;
    ensure_same_shape(x0.shape(), mask.shape())?;
    let mut out = x0.to_owned();
    Zip::from(&mut out)
        .and(&x_t)
        .and(&mask.values)
        .for_each(|o, &n, &m| {
            if m {
                *o = n;
            }
        });
    Ok(out)
}

/// Copies the `size` region at `pos` out of a `(C, H, W)` image.
pub fn extract_patch(
    image: ArrayView3<f32>,
    pos: (usize, usize),
    size: (usize, usize),
) -> Array3<f32> {
    image
        .slice(s![.., pos.0..pos.0 + size.0, pos.1..pos.1 + size.1])
        .to_owned()
}

/// Places every patch at its position and averages overlaps.
///
/// Contributions are accumulated in grid order regardless of the order of
/// `patches`, so the result does not depend on it.
pub fn stitch(patches: &[(Array3<f32>, (usize, usize))], grid: &PatchGrid) -> Result<Array3<f32>> {
    let (h, w) = grid.patch_size();
    let channels = match patches.first() {
        Some((p, _)) => p.shape()[0],
        None => return Err(Error::param("no patch outputs to stitch")),
    };
    let (hh, ww) = grid.image_size();
    let mut sum = Array3::<f32>::zeros((channels, hh, ww));
    let mut count = Array2::<u32>::zeros((hh, ww));
    for &pos in grid.positions() {
        let (patch, _) = patches
            .iter()
            .find(|(_, p)| *p == pos)
            .ok_or_else(|| Error::param(format!("missing patch output for position {pos:?}")))?;
        ensure_same_shape(&[channels, h, w], patch.shape())?;
        sum.slice_mut(s![.., pos.0..pos.0 + h, pos.1..pos.1 + w])
            .zip_mut_with(patch, |acc, v| *acc += v);
        count
            .slice_mut(s![pos.0..pos.0 + h, pos.1..pos.1 + w])
            .mapv_inplace(|c| c + 1);
    }
    if let Some((_, pos)) = patches.iter().find(|(_, p)| !grid.positions().contains(p)) {
        return Err(Error::param(format!("patch position {pos:?} not on the grid")));
    }
    for mut plane in sum.outer_iter_mut() {
        Zip::from(&mut plane).and(&count).for_each(|v, &c| {
            if c > 1 {
                *v /= c as f32;
            }
        });
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn brute_force_cover(grid: &PatchGrid) -> Vec<Vec<u32>> {
        let (hh, ww) = grid.image_size();
        let (h, w) = grid.patch_size();
        let mut cov = vec![vec![0u32; ww]; hh];
        for &(r, c) in grid.positions() {
            assert!(r + h <= hh && c + w <= ww);
            for row in cov.iter_mut().skip(r).take(h) {
                for v in row.iter_mut().skip(c).take(w) {
                    *v += 1;
                }
            }
        }
        cov
    }

    #[test]
    fn default_grid_has_four_patches() {
        let g = PatchGrid::new(96, 96, 48, 48).unwrap();
        assert_eq!(g.positions(), &[(0, 0), (0, 48), (48, 0), (48, 48)]);
        assert_eq!(g.len(), 4);
        // Matches ceil((W-w)/w) + ceil((H-h)/h) + 2 at this configuration.
        assert_eq!(g.len(), 1 + 1 + 2);
    }

    #[test]
    fn full_image_grid() {
        let g = PatchGrid::new(64, 40, 64, 40).unwrap();
        assert_eq!(g.positions(), &[(0, 0)]);
        assert!(g.is_full_image());
        assert!(g.mask(0, 2).unwrap().values().iter().all(|v| *v));
    }

    #[test]
    fn overlapping_grid_60_on_96() {
        let g = PatchGrid::new(96, 96, 60, 60).unwrap();
        assert_eq!(g.positions(), &[(0, 0), (0, 36), (36, 0), (36, 36)]);
        let cov = brute_force_cover(&g);
        for (r, row) in cov.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                let per_axis = |i: usize| if (36..60).contains(&i) { 2 } else { 1 };
                assert_eq!(n, per_axis(r) * per_axis(c), "({r},{c})");
            }
        }
        assert_eq!(g.coverage()[[40, 10]], 2);
    }

    #[test]
    fn small_patches_need_full_cartesian_grid() {
        let g = PatchGrid::new(96, 96, 32, 32).unwrap();
        assert_eq!(g.len(), 9);
        assert!(g.coverage().iter().all(|&c| c == 1));
    }

    #[test]
    fn oversized_patch_rejected() {
        assert!(PatchGrid::new(32, 32, 33, 8).is_err());
        assert!(PatchGrid::new(32, 32, 0, 8).is_err());
    }

    #[test]
    fn mask_of_last_default_patch() {
        let g = PatchGrid::new(96, 96, 48, 48).unwrap();
        let m = g.mask(3, 1).unwrap();
        for ((_, r, c), &v) in m.values().indexed_iter() {
            assert_eq!(v, r >= 48 && c >= 48);
        }
        assert_eq!(m.count(), 48 * 48);
        assert!(g.mask(4, 1).is_err());
    }

    #[test]
    fn masks_partition_non_overlapping_grid() {
        let g = PatchGrid::new(64, 64, 32, 16).unwrap();
        let mut total = Array3::<u32>::zeros((2, 64, 64));
        for k in 0..g.len() {
            let m = g.mask(k, 2).unwrap();
            assert_eq!(m.count(), 2 * 32 * 16);
            total.zip_mut_with(m.values(), |t, &v| *t += v as u32);
        }
        assert!(total.iter().all(|&t| t == 1));
    }

    #[test]
    fn composition_extremes() {
        let x0 = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i + j) as f32);
        let xt = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| -((i * j) as f32) - 0.5);
        let ones = BinaryMask::ones(1, (4, 4));
        assert_eq!(apply_patch_noise(x0.view(), xt.view(), &ones).unwrap(), xt);
        assert_eq!(
            apply_patch_noise(x0.view(), xt.view(), &ones.complement()).unwrap(),
            x0
        );
        let bad = BinaryMask::ones(1, (4, 5));
        assert!(apply_patch_noise(x0.view(), xt.view(), &bad).is_err());
    }

    #[test]
    fn stitch_constant_and_missing() {
        let g = PatchGrid::new(96, 96, 60, 60).unwrap();
        let patches: Vec<_> = g
            .positions()
            .iter()
            .map(|&p| (Array3::from_elem((1, 60, 60), 0.25f32), p))
            .collect();
        let out = stitch(&patches, &g).unwrap();
        assert!(out.iter().all(|&v| v == 0.25));
        assert!(stitch(&patches[..3], &g).is_err());
    }

    #[test]
    fn stitch_overlap_is_mean_of_contributors() {
        let g = PatchGrid::new(96, 96, 60, 60).unwrap();
        let patches: Vec<_> = g
            .positions()
            .iter()
            .enumerate()
            .map(|(k, &p)| (Array3::from_elem((1, 60, 60), k as f32 + 1.0), p))
            .collect();
        let out = stitch(&patches, &g).unwrap();
        // Accumulate-and-count oracle.
        let mut sum = vec![0.0f64; 96 * 96];
        let mut cnt = vec![0u32; 96 * 96];
        for (k, &(r, c)) in g.positions().iter().enumerate() {
            for i in r..r + 60 {
                for j in c..c + 60 {
                    sum[i * 96 + j] += k as f64 + 1.0;
                    cnt[i * 96 + j] += 1;
                }
            }
        }
        for i in 0..96 {
            for j in 0..96 {
                let want = sum[i * 96 + j] / cnt[i * 96 + j] as f64;
                assert!((out[[0, i, j]] as f64 - want).abs() < 1e-6);
            }
        }
        assert_eq!(out[[0, 40, 40]], 2.5);
        assert_eq!(out[[0, 40, 70]], 3.0);
    }

    #[test]
    fn stitch_non_overlapping_is_placement() {
        let g = PatchGrid::new(8, 8, 4, 4).unwrap();
        let patches: Vec<_> = g
            .positions()
            .iter()
            .map(|&p| {
                (
                    Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (p.0 + i) as f32 * 0.1 + (p.1 + j) as f32),
                    p,
                )
            })
            .collect();
        let out = stitch(&patches, &g).unwrap();
        for ((_, i, j), &v) in out.indexed_iter() {
            assert_eq!(v, i as f32 * 0.1 + j as f32);
        }
    }

    proptest! {
        #[test]
        fn grid_invariants(hh in 1usize..80, ww in 1usize..80, fh in 0.05f64..1.0, fw in 0.05f64..1.0) {
            let h = ((hh as f64 * fh).ceil() as usize).clamp(1, hh);
            let w = ((ww as f64 * fw).ceil() as usize).clamp(1, ww);
            let g = PatchGrid::new(hh, ww, h, w).unwrap();
            let cov = brute_force_cover(&g);
            prop_assert!(cov.iter().flatten().all(|&c| c >= 1));
            let mut uniq = g.positions().to_vec();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), g.len());
        }

        #[test]
        fn stitch_round_trip_and_order(seed in 0u64..1000, patch in 8usize..33) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let src = Array3::from_shape_fn((2, 32, 32), |_| rng.random::<f32>());
            let g = PatchGrid::new(32, 32, patch, patch).unwrap();
            let mut patches: Vec<_> = g
                .positions()
                .iter()
                .map(|&p| (extract_patch(src.view(), p, (patch, patch)), p))
                .collect();
            let out = stitch(&patches, &g).unwrap();
            for (a, b) in out.iter().zip(src.iter()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            patches.reverse();
            prop_assert_eq!(stitch(&patches, &g).unwrap(), out);
        }

        #[test]
        fn composition_partition(seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x0 = Array3::from_shape_fn((1, 16, 16), |_| rng.random::<f32>());
            let xt = Array3::from_shape_fn((1, 16, 16), |_| rng.random::<f32>() * 2.0 - 1.0);
            let r = rng.random_range(0..12);
            let c = rng.random_range(0..12);
            let m = BinaryMask::rectangle(1, (16, 16), (r, c), (4, 4)).unwrap();
            let a = apply_patch_noise(x0.view(), xt.view(), &m).unwrap();
            let b = apply_patch_noise(x0.view(), xt.view(), &m.complement()).unwrap();
            for ((_, i, j), v) in a.indexed_iter() {
                let inside = (r..r + 4).contains(&i) && (c..c + 4).contains(&j);
                prop_assert_eq!(*v, if inside { xt[[0, i, j]] } else { x0[[0, i, j]] });
                let total = v + b[[0, i, j]];
                prop_assert!((total - (x0[[0, i, j]] + xt[[0, i, j]])).abs() <= 1e-6);
            }
        }
    }
}
