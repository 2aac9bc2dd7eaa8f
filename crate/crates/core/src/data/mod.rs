//! Volumes, synthetic phantoms, I/O, preprocessing and dataset splits.

mod io;
mod phantom;
mod preprocess;
mod splits;

pub use io::{load_volume, save_ground_truth, save_volume, DatasetManifest, ManifestEntry, SubjectRole};
pub use phantom::{generate_phantom, inject_anomaly, AnomalyConfig, PhantomConfig};
pub use preprocess::preprocess;
pub use splits::{make_splits, DatasetSplit};

use ndarray::{s, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::tensor::{BinaryVolume, SliceTensor};

/// A channel-first volume `(C, D, H, W)` with its brain mask `(D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTensor {
    pub values: Array4<f32>,
    pub brain_mask: BinaryVolume,
    /// Voxel size along `(D, H, W)`.
    pub spacing: [f32; 3],
    pub subject_id: String,
}

impl VolumeTensor {
    pub fn new(values: Array4<f32>, brain_mask: BinaryVolume, subject_id: impl Into<String>) -> Result<Self> {
        let (_, d, h, w) = values.dim();
        if brain_mask.dim() != (d, h, w) {
            return Err(Error::Shape {
                expected: vec![d, h, w],
                actual: brain_mask.shape().to_vec(),
            });
        }
        Ok(Self {
            values,
            brain_mask,
            spacing: [1.0; 3],
            subject_id: subject_id.into(),
        })
    }

    /// Mask is the nonzero support of the first channel.
    pub fn from_values(values: Array4<f32>, subject_id: impl Into<String>) -> Self {
        let brain_mask = values.index_axis(Axis(0), 0).mapv(|v| v != 0.0);
        Self {
            values,
            brain_mask,
            spacing: [1.0; 3],
            subject_id: subject_id.into(),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn depth(&self) -> usize {
        self.values.dim().1
    }

    /// `(H, W)`.
    pub fn slice_size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.values.dim();
        (h, w)
    }

    pub fn slice(&self, index: usize) -> SliceTensor {
        self.values.slice(s![.., index, .., ..]).to_owned()
    }

    pub fn slices(&self) -> impl Iterator<Item = SliceTensor> + '_ {
        (0..self.depth()).map(|d| self.slice(d))
    }

    /// Reassembles slices `(C, H, W)` along the depth axis.
    pub fn from_slices(slices: &[SliceTensor], like: &VolumeTensor) -> Result<Self> {
        if slices.len() != like.depth() {
            return Err(Error::param(format!(
                "{} slices for a volume of depth {}",
                slices.len(),
                like.depth()
            )));
        }
        let mut values = Array4::zeros(like.values.raw_dim());
        for (d, sl) in slices.iter().enumerate() {
            crate::error::ensure_same_shape(&values.slice(s![.., d, .., ..]).shape().to_vec(), sl.shape())?;
            values.slice_mut(s![.., d, .., ..]).assign(sl);
        }
        Ok(Self {
            values,
            ..like.clone()
        })
    }

    /// Channel-mean intensity per voxel.
    pub fn mean_channel(&self) -> Array3<f32> {
        self.values.mean_axis(Axis(0)).expect("at least one channel")
    }
}
