//! The `.bin` + `.json` array container and the dataset directory layout:
//! `root/patient_<id>/frame_<id>_<kind>.{bin,json}` with kind one of
//! `image`, `label`, `scribble`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{check_dense_values, check_scribble_values, DenseLabel, Frame, ImageVolume, ScribbleMask, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<[f64; 3]>,
}

impl ArrayHeader {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Raw array payload, row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// Appends rather than replaces, so stems may themselves contain dots.
fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn sidecar(stem: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(stem, "bin"), with_suffix(stem, "json"))
}

/// Writes `<stem>.bin` and `<stem>.json`. Each file goes through a temporary
/// name and a rename so readers never observe a partial write.
pub fn write_array(stem: &Path, header: &ArrayHeader, data: &ArrayData) -> Result<()> {
    let (bin_path, json_path) = sidecar(stem);
    let bytes: Vec<u8> = match (header.dtype, data) {
        (Dtype::F32, ArrayData::F32(values)) if values.len() == header.len() => {
            values.iter().flat_map(|v| v.to_le_bytes()).collect()
        }
        (Dtype::U8, ArrayData::U8(values)) if values.len() == header.len() => values.clone(),
        _ => {
            return Err(Error::validation(format!(
                "payload for {} does not match header {:?}",
                stem.display(),
                header
            )))
        }
    };
    write_atomic(&bin_path, &bytes)?;
    let json = serde_json::to_vec(header)?;
    write_atomic(&json_path, &json)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_array(stem: &Path) -> Result<(ArrayHeader, ArrayData)> {
    let (bin_path, json_path) = sidecar(stem);
    let json = fs::read(&json_path).map_err(|e| Error::format(&json_path, format!("cannot read header: {e}")))?;
    let header: ArrayHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::format(&json_path, format!("bad header: {e}")))?;
    let bytes = fs::read(&bin_path).map_err(|e| Error::format(&bin_path, format!("cannot read payload: {e}")))?;
    let expected = header.len() * header.dtype.width();
    if bytes.len() != expected {
        return Err(Error::format(
            &bin_path,
            format!("payload has {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let data = match header.dtype {
        Dtype::F32 => ArrayData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::U8 => ArrayData::U8(bytes),
    };
    Ok((header, data))
}

fn volume_header(stem: &Path, header: &ArrayHeader) -> Result<((usize, usize, usize), [f64; 3])> {
    let json_path = with_suffix(stem, "json");
    let &[d, h, w] = header.shape.as_slice() else {
        return Err(Error::format(json_path, format!("expected a 3D shape, got {:?}", header.shape)));
    };
    let spacing = header
        .spacing_mm
        .ok_or_else(|| Error::format(&json_path, "missing spacing_mm"))?;
    Ok(((d, h, w), spacing))
}

fn read_f32_volume(stem: &Path) -> Result<(Array3<f32>, [f64; 3])> {
    let (header, data) = read_array(stem)?;
    let (shape, spacing) = volume_header(stem, &header)?;
    match data {
        ArrayData::F32(values) => Ok((Array3::from_shape_vec(shape, values).expect("length checked"), spacing)),
        ArrayData::U8(_) => Err(Error::format(with_suffix(stem, "json"), "expected dtype f32")),
    }
}

fn read_u8_volume(stem: &Path) -> Result<Array3<u8>> {
    let (header, data) = read_array(stem)?;
    let (shape, _) = volume_header(stem, &header)?;
    match data {
        ArrayData::U8(values) => Ok(Array3::from_shape_vec(shape, values).expect("length checked")),
        ArrayData::F32(_) => Err(Error::format(with_suffix(stem, "json"), "expected dtype u8")),
    }
}

fn u8_header(labels: &Array3<u8>, spacing: [f64; 3]) -> ArrayHeader {
    ArrayHeader {
        dtype: Dtype::U8,
        shape: labels.shape().to_vec(),
        spacing_mm: Some(spacing),
    }
}

fn standard_u8(labels: &Array3<u8>) -> ArrayData {
    ArrayData::U8(labels.iter().copied().collect())
}

/// Writes every frame under `root` in the dataset layout.
pub fn write_dataset(root: &Path, frames: &[Frame]) -> Result<()> {
    for frame in frames {
        let image = &frame.image;
        let dir = root.join(format!("patient_{}", image.patient_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = |kind: &str| dir.join(format!("frame_{}_{kind}", image.frame_id));
        write_array(
            &stem("image"),
            &ArrayHeader {
                dtype: Dtype::F32,
                shape: image.voxels.shape().to_vec(),
                spacing_mm: Some(image.spacing),
            },
            &ArrayData::F32(image.voxels.iter().copied().collect()),
        )?;
        write_array(
            &stem("scribble"),
            &u8_header(&frame.scribble.labels, image.spacing),
            &standard_u8(&frame.scribble.labels),
        )?;
        if let Some(dense) = &frame.dense {
            write_array(&stem("label"), &u8_header(&dense.labels, image.spacing), &standard_u8(&dense.labels))?;
        }
    }
    Ok(())
}

/// Loads every frame found under `root`, sorted by `(patient_id, frame_id)`.
///
/// A frame is identified by its `frame_<id>_image.json` header; the scribble
/// file is required and the dense label is optional.
pub fn load_dataset(root: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut patient_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("patient_") {
            if entry.path().is_dir() {
                patient_dirs.push((id.to_string(), entry.path()));
            }
        }
    }
    patient_dirs.sort();

    for (patient_id, dir) in patient_dirs {
        let mut frame_ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name
                .strip_prefix("frame_")
                .and_then(|rest| rest.strip_suffix("_image.json"))
            {
                frame_ids.push(id.to_string());
            }
        }
        frame_ids.sort();
        for frame_id in frame_ids {
            let stem = |kind: &str| dir.join(format!("frame_{frame_id}_{kind}"));
            let (voxels, spacing) = read_f32_volume(&stem("image"))?;
            let image = ImageVolume::new(voxels, spacing, patient_id.clone(), frame_id.clone())?;

            let scribble_stem = stem("scribble");
            let scribble = read_u8_volume(&scribble_stem)?;
            check_scribble_values(scribble.iter().copied(), NUM_CLASSES).map_err(|e| {
                Error::validation(format!("{}: {e}", with_suffix(&scribble_stem, "bin").display()))
            })?;
            let scribble = ScribbleMask {
                labels: scribble,
                num_classes: NUM_CLASSES,
            };

            let label_stem = stem("label");
            let dense = if with_suffix(&label_stem, "json").exists() {
                let labels = read_u8_volume(&label_stem)?;
                check_dense_values(labels.iter().copied(), NUM_CLASSES).map_err(|e| {
                    Error::validation(format!("{}: {e}", with_suffix(&label_stem, "bin").display()))
                })?;
                Some(DenseLabel {
                    labels,
                    num_classes: NUM_CLASSES,
                })
            } else {
                None
            };
            frames.push(Frame::new(image, scribble, dense)?);
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UNLABELED;

    fn fixture(patient: &str, frame: &str, shape: (usize, usize, usize)) -> Frame {
        let voxels = Array3::from_shape_fn(shape, |(z, y, x)| (z * 100 + y * 10 + x) as f32 * 0.5);
        let scribble = Array3::from_shape_fn(shape, |(_, y, x)| if x == y { (x % 4) as u8 } else { UNLABELED });
        let dense = Array3::from_shape_fn(shape, |(_, y, x)| ((x + y) % 4) as u8);
        Frame::new(
            ImageVolume::new(voxels, [10.0, 1.25, 1.25], patient, frame).unwrap(),
            ScribbleMask::new(scribble, 4).unwrap(),
            Some(DenseLabel::new(dense, 4).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn empty_directory_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn one_patient_two_frames() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![fixture("001", "02", (8, 64, 64)), fixture("001", "01", (8, 64, 64))];
        write_dataset(dir.path(), &frames).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].image.frame_id, "01");
        assert_eq!(loaded[1].image.frame_id, "02");
        for f in &loaded {
            assert_eq!(f.image.voxels.dim(), (8, 64, 64));
        }
        assert_eq!(loaded[0], frames[1]);
        assert_eq!(loaded[1], frames[0]);
    }

    #[test]
    fn header_bytes_are_stable() {
        let header = ArrayHeader {
            dtype: Dtype::F32,
            shape: vec![2, 3, 4],
            spacing_mm: Some([10.0, 1.5, 1.5]),
        };
        assert_eq!(
            serde_json::to_string(&header).unwrap(),
            r#"{"dtype":"f32","shape":[2,3,4],"spacing_mm":[10.0,1.5,1.5]}"#
        );
    }

    #[test]
    fn corrupt_header_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[fixture("007", "01", (1, 4, 4))]).unwrap();
        let bad = dir.path().join("patient_007/frame_01_image.json");
        fs::write(&bad, b"{not json").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            Error::Format { path, .. } => assert_eq!(path, bad),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[fixture("007", "01", (1, 4, 4))]).unwrap();
        let bin = dir.path().join("patient_007/frame_01_image.bin");
        fs::write(&bin, [0u8; 7]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_mismatch_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[fixture("007", "01", (1, 4, 4))]).unwrap();
        let stem = dir.path().join("patient_007/frame_01_label");
        write_array(
            &stem,
            &ArrayHeader {
                dtype: Dtype::U8,
                shape: vec![1, 4, 5],
                spacing_mm: Some([1.0, 1.0, 1.0]),
            },
            &ArrayData::U8(vec![0; 20]),
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_label_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[fixture("007", "01", (1, 4, 4))]).unwrap();
        let stem = dir.path().join("patient_007/frame_01_scribble");
        let mut values = vec![UNLABELED; 16];
        values[3] = 9;
        write_array(
            &stem,
            &ArrayHeader {
                dtype: Dtype::U8,
                shape: vec![1, 4, 4],
                spacing_mm: Some([1.0, 1.0, 1.0]),
            },
            &ArrayData::U8(values),
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("frame_01_scribble.bin")), "{err}");
    }
}
