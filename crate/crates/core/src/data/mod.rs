//! Datasets: volumes, scribble and dense label masks, per-slice samples,
//! the on-disk container, preprocessing, fold splitting and a synthetic
//! cardiac-like generator.

mod folds;
mod io;
mod preprocess;
mod synth;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use folds::{split_folds, FoldSplit};
pub(crate) use io::write_atomic;
pub use io::{load_dataset, read_array, write_array, write_dataset, ArrayData, ArrayHeader, Dtype};
pub use preprocess::{
    augment, normalize_intensity, normalize_slice, resize_bilinear, resize_nearest, resize_sample, AugmentConfig,
};
pub use synth::{generate_dataset, synthesize_dataset, synthesize_scribbles, SynthSpec};

/// Sentinel for pixels without a scribble.
pub const UNLABELED: u8 = 255;

/// Class ids follow the order background, right ventricle, myocardium, left ventricle.
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "RV", "Myo", "LV"];

/// A scan: intensities indexed `[slice, row, col]` with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    pub voxels: Array3<f32>,
    pub spacing: [f64; 3],
    pub patient_id: String,
    pub frame_id: String,
}

impl ImageVolume {
    pub fn new(
        voxels: Array3<f32>,
        spacing: [f64; 3],
        patient_id: impl Into<String>,
        frame_id: impl Into<String>,
    ) -> Result<Self> {
        let volume = ImageVolume {
            voxels,
            spacing,
            patient_id: patient_id.into(),
            frame_id: frame_id.into(),
        };
        volume.validate()?;
        Ok(volume)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxels.shape().contains(&0) {
            return Err(Error::validation(format!(
                "volume {}/{} has an empty dimension: {:?}",
                self.patient_id,
                self.frame_id,
                self.voxels.shape()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation(format!(
                "volume {}/{} has non-positive spacing {:?}",
                self.patient_id, self.frame_id, self.spacing
            )));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "volume {}/{} contains non-finite intensities",
                self.patient_id, self.frame_id
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

/// Sparse annotation: class ids `0..num_classes` or [`UNLABELED`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleMask {
    pub labels: Array3<u8>,
    pub num_classes: usize,
}

impl ScribbleMask {
    pub fn new(labels: Array3<u8>, num_classes: usize) -> Result<Self> {
        check_scribble_values(labels.iter().copied(), num_classes)?;
        Ok(ScribbleMask {
            labels,
            num_classes,
        })
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != UNLABELED).count()
    }
}

/// Dense annotation: every voxel carries a class id.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLabel {
    pub labels: Array3<u8>,
    pub num_classes: usize,
}

impl DenseLabel {
    pub fn new(labels: Array3<u8>, num_classes: usize) -> Result<Self> {
        check_dense_values(labels.iter().copied(), num_classes)?;
        Ok(DenseLabel {
            labels,
            num_classes,
        })
    }
}

pub(crate) fn check_scribble_values(
    values: impl Iterator<Item = u8>,
    num_classes: usize,
) -> Result<()> {
    for v in values {
        if v != UNLABELED && v as usize >= num_classes {
            return Err(Error::validation(format!(
                "scribble value {v} is neither a class id below {num_classes} nor UNLABELED"
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_dense_values(values: impl Iterator<Item = u8>, num_classes: usize) -> Result<()> {
    for v in values {
        if v as usize >= num_classes {
            return Err(Error::validation(format!(
                "dense label value {v} is not a class id below {num_classes}"
            )));
        }
    }
    Ok(())
}

/// One annotated scan as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: ImageVolume,
    pub scribble: ScribbleMask,
    pub dense: Option<DenseLabel>,
}

impl Frame {
    pub fn new(image: ImageVolume, scribble: ScribbleMask, dense: Option<DenseLabel>) -> Result<Self> {
        let shape = image.voxels.shape();
        if scribble.labels.shape() != shape {
            return Err(Error::validation(format!(
                "scribble shape {:?} differs from image shape {:?} for {}/{}",
                scribble.labels.shape(),
                shape,
                image.patient_id,
                image.frame_id
            )));
        }
        if let Some(dense) = &dense {
            if dense.labels.shape() != shape {
                return Err(Error::validation(format!(
                    "label shape {:?} differs from image shape {:?} for {}/{}",
                    dense.labels.shape(),
                    shape,
                    image.patient_id,
                    image.frame_id
                )));
            }
        }
        Ok(Frame {
            image,
            scribble,
            dense,
        })
    }

    /// Splits the frame into per-slice samples with intensities rescaled to `[0, 1]`.
    pub fn slices(&self) -> Result<Vec<SliceSample>> {
        let normalized = normalize_intensity(&self.image)?;
        let depth = self.image.voxels.len_of(Axis(0));
        (0..depth)
            .map(|z| {
                SliceSample::new(
                    normalized.voxels.index_axis(Axis(0), z).to_owned(),
                    self.scribble.labels.index_axis(Axis(0), z).to_owned(),
                    self.dense
                        .as_ref()
                        .map(|d| d.labels.index_axis(Axis(0), z).to_owned()),
                    Provenance {
                        patient_id: self.image.patient_id.clone(),
                        frame_id: self.image.frame_id.clone(),
                        slice_index: z,
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub patient_id: String,
    pub frame_id: String,
    pub slice_index: usize,
}

/// A 2D training/evaluation unit. The image is expected in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub scribble: Array2<u8>,
    pub dense: Option<Array2<u8>>,
    pub provenance: Provenance,
}

impl SliceSample {
    pub fn new(
        image: Array2<f32>,
        scribble: Array2<u8>,
        dense: Option<Array2<u8>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if image.dim() != scribble.dim() {
            return Err(Error::validation(format!(
                "slice image {:?} and scribble {:?} differ in shape",
                image.dim(),
                scribble.dim()
            )));
        }
        if let Some(dense) = &dense {
            if dense.dim() != image.dim() {
                return Err(Error::validation(format!(
                    "slice image {:?} and dense label {:?} differ in shape",
                    image.dim(),
                    dense.dim()
                )));
            }
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("slice image values must lie in [0, 1]"));
        }
        Ok(SliceSample {
            image,
            scribble,
            dense,
            provenance,
        })
    }

    /// Drops the dense label so training code cannot read it.
    pub fn without_dense(mut self) -> Self {
        self.dense = None;
        self
    }

    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }
}
