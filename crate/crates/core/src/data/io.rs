//! Volume containers: NIfTI (`.nii`, `.nii.gz`) and a raw little-endian
//! container (`.json` sidecar + `.raw` payload), plus dataset manifests.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis, Ix4};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::VolumeTensor;
use crate::error::{Error, Result};
use crate::tensor::BinaryVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti,
    Raw,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Format::Nifti)
    } else if name.ends_with(".json") || name.ends_with(".raw") {
        Ok(Format::Raw)
    } else {
        Err(ingest(path, "unknown volume extension (expected .nii, .nii.gz, .json or .raw)"))
    }
}

fn ingest(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Loads a volume. NIfTI files may be 3D (single channel) or 4D with channels
/// last; the brain mask is the nonzero support of the first channel.
pub fn load_volume(path: &Path) -> Result<VolumeTensor> {
    match format_of(path)? {
        Format::Nifti => load_nifti(path),
        Format::Raw => load_raw(path),
    }
}

/// Writes a volume in the format implied by the file extension.
pub fn save_volume(path: &Path, volume: &VolumeTensor) -> Result<()> {
    match format_of(path)? {
        Format::Nifti => save_nifti(path, volume),
        Format::Raw => save_raw(path, volume),
    }
}

fn subject_from_path(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("subject");
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .trim_end_matches(".json")
        .trim_end_matches(".raw")
        .to_string()
}

fn load_nifti(path: &Path) -> Result<VolumeTensor> {
    let object = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| ingest(path, e))?;
    let pixdim = object.header().pixdim;
    let data = object
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| ingest(path, e))?;
    // Stored axes are (x, y, z[, c]); ours are (c, z, y, x).
    let data = match data.ndim() {
        3 => data.insert_axis(Axis(3)),
        4 => data,
        n => return Err(ingest(path, format!("expected a 3D or 4D image, got {n} dimensions"))),
    };
    let data = data
        .into_dimensionality::<Ix4>()
        .map_err(|e| ingest(path, e))?;
    let values = data.permuted_axes([3, 2, 1, 0]).as_standard_layout().into_owned();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ingest(path, "non-finite intensities"));
    }
    let mut volume = VolumeTensor::from_values(values, subject_from_path(path));
    volume.spacing = [pixdim[3], pixdim[2], pixdim[1]].map(|s| if s > 0.0 { s } else { 1.0 });
    Ok(volume)
}

fn save_nifti(path: &Path, volume: &VolumeTensor) -> Result<()> {
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0; 8];
    header.pixdim[1] = volume.spacing[2];
    header.pixdim[2] = volume.spacing[1];
    header.pixdim[3] = volume.spacing[0];
    let writer = nifti::writer::WriterOptions::new(path).reference_header(&header);
    // The writer expects (x, y, z[, c]) logical order.
    let result = if volume.channels() == 1 {
        let data = volume.values.index_axis(Axis(0), 0).reversed_axes();
        writer.write_nifti(&data)
    } else {
        let data = volume.values.view().permuted_axes([3, 2, 1, 0]);
        writer.write_nifti(&data)
    };
    result.map_err(|e| ingest(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    subject_id: String,
    /// `(C, D, H, W)`.
    shape: [usize; 4],
    spacing: [f32; 3],
    dtype: String,
}

fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

fn save_raw(path: &Path, volume: &VolumeTensor) -> Result<()> {
    let (json_path, raw_path) = raw_paths(path);
    let (c, d, h, w) = volume.values.dim();
    let header = RawHeader {
        subject_id: volume.subject_id.clone(),
        shape: [c, d, h, w],
        spacing: volume.spacing,
        dtype: "f32le+mask_u8".into(),
    };
    fs::write(&json_path, serde_json::to_vec_pretty(&header)?)?;
    let mut out = BufWriter::new(fs::File::create(&raw_path)?);
    for v in volume.values.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    for m in volume.brain_mask.iter() {
        out.write_all(&[*m as u8])?;
    }
    out.flush()?;
    Ok(())
}

fn load_raw(path: &Path) -> Result<VolumeTensor> {
    let (json_path, raw_path) = raw_paths(path);
    let header: RawHeader = serde_json::from_slice(&fs::read(&json_path)?)
        .map_err(|e| ingest(&json_path, e))?;
    if header.dtype != "f32le+mask_u8" {
        return Err(ingest(&json_path, format!("unsupported dtype {}", header.dtype)));
    }
    let [c, d, h, w] = header.shape;
    let voxels = d * h * w;
    let mut bytes = Vec::new();
    fs::File::open(&raw_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != c * voxels * 4 + voxels {
        return Err(ingest(
            &raw_path,
            format!("payload has {} bytes, header implies {}", bytes.len(), c * voxels * 4 + voxels),
        ));
    }
    let (value_bytes, mask_bytes) = bytes.split_at(c * voxels * 4);
    let values: Vec<f32> = value_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ingest(&raw_path, "non-finite intensities"));
    }
    let values = Array4::from_shape_vec((c, d, h, w), values).expect("length checked");
    let mask: BinaryVolume =
        Array3::from_shape_vec((d, h, w), mask_bytes.iter().map(|b| *b != 0).collect()).expect("length checked");
    let mut volume = VolumeTensor::new(values, mask, header.subject_id)?;
    volume.spacing = header.spacing;
    Ok(volume)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectRole {
    Train,
    ValHealthy,
    ValUnhealthy,
    /// Anomalous test subject; needs ground truth.
    Test,
    /// Healthy test subject used for the reconstruction error.
    TestHealthy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub role: SubjectRole,
    pub path: PathBuf,
    /// Voxel-wise annotation volume; voxels above 0.5 are anomalous.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

/// List of subjects with roles. Relative paths are resolved against the
/// manifest's directory on load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub subjects: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut manifest: Self =
            serde_json::from_slice(&fs::read(path)?).map_err(|e| ingest(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut manifest.subjects {
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            if let Some(gt) = entry.ground_truth.as_mut() {
                if gt.is_relative() {
                    *gt = base.join(&*gt);
                }
            }
            if matches!(entry.role, SubjectRole::Test | SubjectRole::ValUnhealthy) && entry.ground_truth.is_none() {
                return Err(ingest(path, format!("anomalous subject {} has no ground truth", entry.id)));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn with_role(&self, role: SubjectRole) -> impl Iterator<Item = &ManifestEntry> {
        self.subjects.iter().filter(move |e| e.role == role)
    }
}

impl ManifestEntry {
    pub fn load(&self) -> Result<VolumeTensor> {
        let mut volume = load_volume(&self.path)?;
        volume.subject_id = self.id.clone();
        Ok(volume)
    }

    /// Loads the annotation, if any, as a binary volume matching the image.
    pub fn load_ground_truth(&self) -> Result<Option<BinaryVolume>> {
        let Some(path) = &self.ground_truth else {
            return Ok(None);
        };
        let gt = load_volume(path)?;
        Ok(Some(gt.values.index_axis(Axis(0), 0).mapv(|v| v > 0.5)))
    }
}

/// Stores a binary annotation as a single-channel volume of zeros and ones.
pub fn save_ground_truth(path: &Path, gt: &BinaryVolume, subject_id: &str) -> Result<()> {
    let values = gt.mapv(|g| g as u8 as f32).insert_axis(Axis(0));
    let volume = VolumeTensor::new(values, gt.clone(), subject_id)?;
    save_volume(path, &volume)
}
