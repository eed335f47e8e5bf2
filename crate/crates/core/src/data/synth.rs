//! Synthetic cardiac-like slices with dense labels and curve-shaped scribbles.
//!
//! Each slice holds a disk (LV) inside an annulus (Myo) and a crescent (RV)
//! hugging the annulus, over a smoothly varying background that contains
//! bright blobs with LV-like intensity.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_dataset, DenseLabel, Frame, ImageVolume, ScribbleMask, NUM_CLASSES, UNLABELED};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_patients: usize,
    /// `(depth, height, width)` of every frame.
    pub shape: [usize; 3],
    pub seed: u64,
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
}

fn default_spacing() -> [f64; 3] {
    [10.0, 1.5, 1.5]
}

/// Twenty patients of eight 64x64 slices.
impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::new(20, [8, 64, 64], 7)
    }
}

impl SynthSpec {
    pub fn new(n_patients: usize, shape: [usize; 3], seed: u64) -> Self {
        SynthSpec {
            n_patients,
            shape,
            seed,
            spacing_mm: default_spacing(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::validation("synthetic dataset needs at least one patient"));
        }
        let [d, h, w] = self.shape;
        if d == 0 || h < 32 || w < 32 {
            return Err(Error::validation(format!(
                "synthetic shape {:?} too small: need depth >= 1 and height, width >= 32",
                self.shape
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation("synthetic spacing must be positive"));
        }
        Ok(())
    }
}

/// Per-patient anatomy, in pixels.
#[derive(Debug, Clone)]
struct Anatomy {
    center: (f64, f64),
    lv_radius: f64,
    myo_thickness: f64,
    rv_radius: f64,
    rv_direction: f64,
    rv_offset: f64,
}

#[derive(Debug, Clone)]
struct Appearance {
    background: f64,
    blobs: Vec<(f64, f64, f64, f64)>,
    lv: f64,
    rv: f64,
    myo: f64,
    ramp: (f64, f64),
    noise: f64,
    gain: f64,
    offset: f64,
}

fn sample_anatomy(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Anatomy {
    let m = h.min(w) as f64;
    let center = (
        h as f64 / 2.0 + rng.random_range(-0.06..0.06) * h as f64,
        w as f64 / 2.0 + rng.random_range(0.0..0.1) * w as f64,
    );
    let lv_radius = rng.random_range(0.09..0.13) * m;
    let myo_thickness = rng.random_range(0.045..0.065) * m;
    let outer = lv_radius + myo_thickness;
    let rv_radius = rng.random_range(1.0..1.3) * outer;
    Anatomy {
        center,
        lv_radius,
        myo_thickness,
        rv_radius,
        rv_direction: PI + rng.random_range(-0.5..0.5),
        rv_offset: outer + rng.random_range(0.1..0.4) * rv_radius,
    }
}

fn sample_appearance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Appearance {
    let m = h.min(w) as f64;
    let lv = rng.random_range(0.75..0.9);
    let n_blobs = rng.random_range(3..=5);
    let blobs = (0..n_blobs)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(0.05..0.12) * m,
                rng.random_range(0.2..0.6),
            )
        })
        .collect();
    let ramp_angle = rng.random_range(0.0..2.0 * PI);
    Appearance {
        background: rng.random_range(0.1..0.25),
        blobs,
        lv,
        rv: lv - rng.random_range(0.0..0.1),
        myo: rng.random_range(0.3..0.4),
        ramp: (ramp_angle.sin() * 0.15 / m, ramp_angle.cos() * 0.15 / m),
        noise: 0.04,
        gain: rng.random_range(200.0..800.0),
        offset: rng.random_range(0.0..50.0),
    }
}

/// Structures shrink toward the apex (last slice).
fn slice_scale(z: usize, depth: usize) -> f64 {
    if depth <= 1 {
        1.0
    } else {
        1.0 - 0.45 * (z as f64 / (depth - 1) as f64).powf(1.5)
    }
}

fn draw_labels(anatomy: &Anatomy, scale: f64, h: usize, w: usize) -> Array2<u8> {
    let (cy, cx) = anatomy.center;
    let lv = anatomy.lv_radius * scale;
    let outer = (anatomy.lv_radius + anatomy.myo_thickness) * scale;
    let rv = anatomy.rv_radius * scale;
    let ry = cy + anatomy.rv_offset * scale * anatomy.rv_direction.sin();
    let rx = cx + anatomy.rv_offset * scale * anatomy.rv_direction.cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (y, x) = (i as f64, j as f64);
        let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
        if d <= lv {
            3
        } else if d <= outer {
            2
        } else if d > outer + 1.0 && ((y - ry).powi(2) + (x - rx).powi(2)).sqrt() <= rv {
            1
        } else {
            0
        }
    })
}

fn draw_image(labels: &Array2<u8>, look: &Appearance, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let noise = Normal::new(0.0, look.noise).expect("positive sigma");
    let mut image = Array2::zeros(labels.raw_dim());
    for ((i, j), &label) in labels.indexed_iter() {
        let (y, x) = (i as f64, j as f64);
        let region = match label {
            3 => look.lv,
            2 => look.myo,
            1 => look.rv,
            _ => {
                look.background
                    + look
                        .blobs
                        .iter()
                        .map(|&(by, bx, s, a)| a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
                        .sum::<f64>()
            }
        };
        let bias = 1.0 + look.ramp.0 * (y - labels.nrows() as f64 / 2.0) + look.ramp.1 * (x - labels.ncols() as f64 / 2.0);
        let value = region * bias + noise.sample(rng);
        image[[i, j]] = (look.offset + look.gain * value) as f32;
    }
    image
}

/// Generates `n_patients` patients with two frames each (`01` end-diastole-like,
/// `02` contracted), including dense labels and synthesized scribbles.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Vec<Frame>> {
    spec.validate()?;
    let [depth, h, w] = spec.shape;
    let mut frames = Vec::with_capacity(spec.n_patients * 2);
    for p in 0..spec.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(p as u64);
        let anatomy = sample_anatomy(&mut rng, h, w);
        let look = sample_appearance(&mut rng, h, w);
        let patient_id = format!("{:03}", p + 1);
        for (frame_id, contraction) in [("01", false), ("02", true)] {
            let mut anatomy = anatomy.clone();
            if contraction {
                anatomy.lv_radius *= 0.78;
                anatomy.myo_thickness *= 1.25;
                anatomy.rv_radius *= 0.85;
                anatomy.rv_offset = anatomy.lv_radius + anatomy.myo_thickness + 0.25 * anatomy.rv_radius;
            }
            let mut image = Array3::zeros((depth, h, w));
            let mut dense = Array3::zeros((depth, h, w));
            let mut scribble = Array3::zeros((depth, h, w));
            for z in 0..depth {
                let labels = draw_labels(&anatomy, slice_scale(z, depth), h, w);
                image.index_axis_mut(Axis(0), z).assign(&draw_image(&labels, &look, &mut rng));
                scribble
                    .index_axis_mut(Axis(0), z)
                    .assign(&synthesize_scribbles(labels.view(), &mut rng));
                dense.index_axis_mut(Axis(0), z).assign(&labels);
            }
            frames.push(Frame::new(
                ImageVolume::new(image, spec.spacing_mm, patient_id.clone(), frame_id)?,
                ScribbleMask::new(scribble, NUM_CLASSES)?,
                Some(DenseLabel::new(dense, NUM_CLASSES)?),
            )?);
        }
    }
    Ok(frames)
}

/// Generates a dataset and writes it under `root`.
pub fn synthesize_dataset(root: &Path, spec: &SynthSpec) -> Result<Vec<Frame>> {
    let frames = generate_dataset(spec)?;
    write_dataset(root, &frames)?;
    Ok(frames)
}

/// Pixels of `mask` at least as deep (minus half a pixel) as every neighbour.
/// Depth is the distance to the nearest pixel outside the mask or the image.
fn medial_ridge(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let padded = Array2::from_shape_fn((h + 2, w + 2), |(i, j)| {
        !(i > 0 && j > 0 && i <= h && j <= w && mask[[i - 1, j - 1]])
    });
    let depth = distance_to(padded.view());
    let mut ridge = Vec::new();
    for ((i, j), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let d = depth[[i + 1, j + 1]];
        let dominated = (0..3).any(|di| (0..3).any(|dj| depth[[i + di, j + dj]] > d + 0.5));
        if !dominated {
            ridge.push((i, j));
        }
    }
    ridge
}

/// Squared distance along one line to the nearest site (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Euclidean distance (in pixels) from every pixel to the nearest `true` site.
pub(crate) fn distance_to(sites: ArrayView2<'_, bool>) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut d = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let mut buf = vec![0.0; h.max(w)];
    for mut col in d.axis_iter_mut(Axis(1)) {
        let f: Vec<f64> = col.iter().copied().collect();
        edt_1d(&f, &mut buf[..h]);
        col.iter_mut().zip(&buf[..h]).for_each(|(c, b)| *c = *b);
    }
    for mut row in d.axis_iter_mut(Axis(0)) {
        let f: Vec<f64> = row.iter().copied().collect();
        edt_1d(&f, &mut buf[..w]);
        row.iter_mut().zip(&buf[..w]).for_each(|(c, b)| *c = b.sqrt());
    }
    d
}

/// Turns a dense slice into a scribble slice.
///
/// Foreground classes are eroded down to a thin curve along their medial
/// ridge: a pixel survives when no 8-neighbour lies more than half a pixel
/// deeper inside the class. The background gets one arc at a random distance of 3..=10 px from the
/// foreground. Everything else is [`UNLABELED`].
pub fn synthesize_scribbles<R: Rng + ?Sized>(dense: ArrayView2<'_, u8>, rng: &mut R) -> Array2<u8> {
    let (h, w) = dense.dim();
    let mut out = Array2::from_elem((h, w), UNLABELED);

    let max_class = dense.iter().copied().max().unwrap_or(0);
    for class in 1..=max_class {
        let mask = dense.mapv(|v| v == class);
        if !mask.iter().any(|&m| m) {
            continue;
        }
        for (i, j) in medial_ridge(&mask) {
            out[[i, j]] = class;
        }
    }

    let foreground = dense.mapv(|v| v != 0);
    let background_pixels = foreground.iter().filter(|&&f| !f).count();
    if background_pixels == 0 {
        return out;
    }
    let fg_count = foreground.len() - background_pixels;
    if fg_count == 0 {
        // No boundary to follow: a circle around the image centre.
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let radius = h.min(w) as f64 / 4.0;
        for ((i, j), o) in out.indexed_iter_mut() {
            let d = ((i as f64 - cy).powi(2) + (j as f64 - cx).powi(2)).sqrt();
            if (d - radius).abs() <= 0.5 {
                *o = 0;
            }
        }
        return out;
    }

    let dist = distance_to(foreground.view());
    let (sy, sx) = foreground
        .indexed_iter()
        .filter(|(_, &f)| f)
        .fold((0.0, 0.0), |(ay, ax), ((i, j), _)| (ay + i as f64, ax + j as f64));
    let (cy, cx) = (sy / fg_count as f64, sx / fg_count as f64);

    let target = rng.random_range(3..=10) as f64;
    let start = rng.random_range(0.0..2.0 * PI);
    let span = rng.random_range(PI..2.0 * PI);
    let ring: Vec<(usize, usize)> = dist
        .indexed_iter()
        .filter(|(_, &d)| d >= target && d < target + 1.0)
        .map(|(ij, _)| ij)
        .collect();
    let arc: Vec<(usize, usize)> = ring
        .iter()
        .copied()
        .filter(|&(i, j)| {
            let angle = (i as f64 - cy).atan2(j as f64 - cx);
            (angle - start).rem_euclid(2.0 * PI) < span
        })
        .collect();
    let chosen = if !arc.is_empty() {
        arc
    } else if !ring.is_empty() {
        ring
    } else {
        let band: Vec<(usize, usize)> = dist
            .indexed_iter()
            .filter(|(_, &d)| (3.0..=10.0).contains(&d))
            .map(|(ij, _)| ij)
            .collect();
        if band.is_empty() {
            // Background too thin for a curve: label its most interior pixel.
            let (farthest, _) = dist
                .indexed_iter()
                .filter(|(ij, _)| !foreground[*ij])
                .fold(((0, 0), f64::NEG_INFINITY), |best, (ij, &d)| if d > best.1 { (ij, d) } else { best });
            vec![farthest]
        } else {
            band
        }
    };
    for ij in chosen {
        out[ij] = 0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_distance(sites: &Array2<bool>) -> Array2<f64> {
        let pts: Vec<(usize, usize)> = sites.indexed_iter().filter(|(_, &s)| s).map(|(ij, _)| ij).collect();
        Array2::from_shape_fn(sites.raw_dim(), |(i, j)| {
            pts.iter()
                .map(|&(a, b)| ((i as f64 - a as f64).powi(2) + (j as f64 - b as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let sites = Array2::from_shape_fn((13, 17), |_| rng.random::<f64>() < 0.05);
            if !sites.iter().any(|&s| s) {
                continue;
            }
            let fast = distance_to(sites.view());
            let slow = brute_distance(&sites);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_patient_has_two_frames_three_files_each() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_dataset(dir.path(), &SynthSpec::new(1, [4, 32, 32], 0)).unwrap();
        let patient = dir.path().join("patient_001");
        let mut names: Vec<String> = std::fs::read_dir(&patient)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names.len(), 12);
        for frame in ["01", "02"] {
            for kind in ["image", "label", "scribble"] {
                for ext in ["bin", "json"] {
                    assert!(names.contains(&format!("frame_{frame}_{kind}.{ext}")));
                }
            }
        }
    }

    #[test]
    fn interior_slices_contain_every_class() {
        let frames = generate_dataset(&SynthSpec::new(6, [8, 64, 64], 42)).unwrap();
        for frame in &frames {
            let dense = &frame.dense.as_ref().unwrap().labels;
            for z in 1..7 {
                let slice = dense.index_axis(Axis(0), z);
                for class in 0..4u8 {
                    assert!(slice.iter().any(|&v| v == class), "class {class} missing on slice {z}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::new(2, [3, 32, 40], 9);
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
    }

    #[test]
    fn too_small_shapes_are_rejected() {
        assert!(generate_dataset(&SynthSpec::new(1, [2, 16, 64], 0)).is_err());
        assert!(generate_dataset(&SynthSpec::new(0, [2, 64, 64], 0)).is_err());
    }

    #[test]
    fn all_background_gets_only_a_background_scribble() {
        let dense = Array2::zeros((40, 40));
        let s = synthesize_scribbles(dense.view(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(s.iter().any(|&v| v == 0));
        assert!(s.iter().all(|&v| v == 0 || v == UNLABELED));
    }

    #[test]
    fn scribbles_agree_with_dense_and_cover_every_class() {
        let frames = generate_dataset(&SynthSpec::new(4, [5, 64, 64], 3)).unwrap();
        for frame in &frames {
            let dense = &frame.dense.as_ref().unwrap().labels;
            for (s, d) in frame.scribble.labels.iter().zip(dense.iter()) {
                if *s != UNLABELED {
                    assert_eq!(s, d);
                }
            }
            for z in 0..5 {
                let ds = dense.index_axis(Axis(0), z);
                let ss = frame.scribble.labels.index_axis(Axis(0), z);
                for class in 0..4u8 {
                    if ds.iter().any(|&v| v == class) {
                        assert!(ss.iter().any(|&v| v == class), "class {class} unscribbled");
                    }
                }
            }
        }
    }

    #[test]
    fn coverage_is_sparse_at_full_resolution() {
        let frames = generate_dataset(&SynthSpec::new(2, [3, 256, 256], 5)).unwrap();
        for frame in &frames {
            for z in 0..3 {
                let slice = frame.scribble.labels.index_axis(Axis(0), z);
                let labeled = slice.iter().filter(|&&v| v != UNLABELED).count();
                assert!((labeled as f64) < 0.05 * slice.len() as f64, "coverage {labeled}");
            }
        }
    }

    #[test]
    fn tiny_class_still_gets_a_pixel() {
        let mut dense = Array2::zeros((40, 40));
        dense[[20, 20]] = 2;
        let s = synthesize_scribbles(dense.view(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s[[20, 20]], 2);
    }
}
