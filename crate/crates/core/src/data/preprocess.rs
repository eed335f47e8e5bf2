use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageVolume, SliceSample, UNLABELED};
use crate::error::{Error, Result};

/// Rescales each slice independently to `[0, 1]`; constant slices become zero.
pub fn normalize_intensity(volume: &ImageVolume) -> Result<ImageVolume> {
    if volume.voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "volume {}/{} contains non-finite intensities",
            volume.patient_id, volume.frame_id
        )));
    }
    let mut out = volume.clone();
    for mut slice in out.voxels.axis_iter_mut(Axis(0)) {
        let normalized = normalize_slice(slice.view());
        slice.assign(&normalized);
    }
    Ok(out)
}

pub fn normalize_slice(slice: ArrayView2<'_, f32>) -> Array2<f32> {
    let (lo, hi) = slice
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::zeros(slice.raw_dim());
    }
    slice.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Source coordinate for output index `i` when corners of input and output align.
fn source_coord(i: usize, input: usize, output: usize) -> f64 {
    if output <= 1 || input <= 1 {
        0.0
    } else {
        i as f64 * (input - 1) as f64 / (output - 1) as f64
    }
}

pub fn resize_bilinear(image: ArrayView2<'_, f32>, target: (usize, usize)) -> Array2<f32> {
    let (h, w) = image.dim();
    if (h, w) == target {
        return image.to_owned();
    }
    Array2::from_shape_fn(target, |(i, j)| {
        let sy = source_coord(i, h, target.0);
        let sx = source_coord(j, w, target.1);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = (sy - y0 as f64) as f32;
        let fx = (sx - x0 as f64) as f32;
        let top = image[[y0, x0]] * (1.0 - fx) + image[[y0, x1]] * fx;
        let bottom = image[[y1, x0]] * (1.0 - fx) + image[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn resize_nearest(labels: ArrayView2<'_, u8>, target: (usize, usize)) -> Array2<u8> {
    let (h, w) = labels.dim();
    if (h, w) == target {
        return labels.to_owned();
    }
    Array2::from_shape_fn(target, |(i, j)| {
        let y = source_coord(i, h, target.0).round() as usize;
        let x = source_coord(j, w, target.1).round() as usize;
        labels[[y.min(h - 1), x.min(w - 1)]]
    })
}

/// Bilinear for the image, nearest-neighbour for label channels.
pub fn resize_sample(sample: &SliceSample, target: (usize, usize)) -> Result<SliceSample> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::validation(format!("resize target {target:?} has a zero dimension")));
    }
    Ok(SliceSample {
        image: resize_bilinear(sample.image.view(), target),
        scribble: resize_nearest(sample.scribble.view(), target),
        dense: sample.dense.as_ref().map(|d| resize_nearest(d.view(), target)),
        provenance: sample.provenance.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotate_prob: f64,
    pub flip_prob: f64,
    pub noise_prob: f64,
    pub noise_sigma_max: f64,
    /// Replaces quarter turns with a free rotation in `±free_rotation_max_deg`.
    pub free_rotation: bool,
    pub free_rotation_max_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_prob: 0.5,
            flip_prob: 0.5,
            noise_prob: 0.5,
            noise_sigma_max: 0.05,
            free_rotation: false,
            free_rotation_max_deg: 20.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            rotate_prob: 0.0,
            flip_prob: 0.0,
            noise_prob: 0.0,
            ..AugmentConfig::default()
        }
    }
}

/// Counter-clockwise quarter turns, matching `numpy.rot90`.
pub(crate) fn rot90<T: Clone>(a: ArrayView2<'_, T>, quarter_turns: usize) -> Array2<T> {
    let mut view = a;
    for _ in 0..quarter_turns % 4 {
        let mut t = view.reversed_axes();
        t.invert_axis(Axis(0));
        view = t;
    }
    view.to_owned()
}

pub(crate) fn flip<T: Clone>(a: ArrayView2<'_, T>, axis: usize) -> Array2<T> {
    let mut view = a;
    view.invert_axis(Axis(axis));
    view.to_owned()
}

fn rotate_free_image(image: ArrayView2<'_, f32>, angle: f64) -> Array2<f32> {
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let sy = c * dy - s * dx + cy;
        let sx = s * dy + c * dx + cx;
        if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
            return 0.0;
        }
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = (sy - y0 as f64) as f32;
        let fx = (sx - x0 as f64) as f32;
        let top = image[[y0, x0]] * (1.0 - fx) + image[[y0, x1]] * fx;
        let bottom = image[[y1, x0]] * (1.0 - fx) + image[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn rotate_free_labels(labels: ArrayView2<'_, u8>, angle: f64, fill: u8) -> Array2<u8> {
    let (h, w) = labels.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let sy = (c * dy - s * dx + cy).round();
        let sx = (s * dy + c * dx + cx).round();
        if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
            fill
        } else {
            labels[[sy as usize, sx as usize]]
        }
    })
}

/// Random rotation, flip and additive Gaussian noise, each applied with its
/// configured probability. Label channels follow the image geometrically;
/// noise touches only the image.
pub fn augment<R: Rng + ?Sized>(sample: &SliceSample, rng: &mut R, config: &AugmentConfig) -> SliceSample {
    let mut out = sample.clone();

    if rng.random::<f64>() < config.rotate_prob {
        if config.free_rotation {
            let max = config.free_rotation_max_deg.to_radians();
            let angle = rng.random_range(-max..=max);
            out.image = rotate_free_image(out.image.view(), angle);
            out.scribble = rotate_free_labels(out.scribble.view(), angle, UNLABELED);
            out.dense = out.dense.map(|d| rotate_free_labels(d.view(), angle, 0));
        } else {
            let k = rng.random_range(1..=3usize);
            out.image = rot90(out.image.view(), k);
            out.scribble = rot90(out.scribble.view(), k);
            out.dense = out.dense.map(|d| rot90(d.view(), k));
        }
    }

    if rng.random::<f64>() < config.flip_prob {
        let axis = rng.random_range(0..2usize);
        out.image = flip(out.image.view(), axis);
        out.scribble = flip(out.scribble.view(), axis);
        out.dense = out.dense.map(|d| flip(d.view(), axis));
    }

    if rng.random::<f64>() < config.noise_prob {
        let sigma = rng.random_range(0.0..=config.noise_sigma_max);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
            Zip::from(&mut out.image).for_each(|v| {
                let noisy = *v as f64 + normal.sample(rng);
                *v = noisy.clamp(0.0, 1.0) as f32;
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn provenance() -> Provenance {
        Provenance {
            patient_id: "p".into(),
            frame_id: "f".into(),
            slice_index: 0,
        }
    }

    fn sample(h: usize, w: usize) -> SliceSample {
        let image = Array2::from_shape_fn((h, w), |(i, j)| ((i * w + j) as f32) / ((h * w) as f32));
        let scribble = Array2::from_shape_fn((h, w), |(i, j)| if (i + 2 * j) % 5 == 0 { ((i + j) % 4) as u8 } else { UNLABELED });
        let dense = Array2::from_shape_fn((h, w), |(i, j)| ((i / 2 + j / 3) % 4) as u8);
        SliceSample::new(image, scribble, Some(dense), provenance()).unwrap()
    }

    #[test]
    fn affine_rescale() {
        let v = ImageVolume::new(Array3::from_shape_vec((1, 1, 3), vec![2.0, 4.0, 6.0]).unwrap(), [1.0; 3], "p", "f").unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.voxels.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_slice_maps_to_zero() {
        let v = ImageVolume::new(Array3::from_elem((2, 1, 3), 5.0), [1.0; 3], "p", "f").unwrap();
        assert!(normalize_intensity(&v).unwrap().voxels.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_range_slice_is_unchanged() {
        let data = vec![0.0, 0.25, 1.0, 0.5];
        let v = ImageVolume::new(Array3::from_shape_vec((1, 2, 2), data.clone()).unwrap(), [1.0; 3], "p", "f").unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().voxels.iter().copied().collect::<Vec<_>>(), data);
    }

    #[test]
    fn normalization_is_per_slice() {
        let v = ImageVolume::new(
            Array3::from_shape_vec((2, 1, 2), vec![0.0, 10.0, 100.0, 300.0]).unwrap(),
            [1.0; 3],
            "p",
            "f",
        )
        .unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.voxels.iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let v = ImageVolume {
            voxels: Array3::from_shape_vec((1, 1, 2), vec![0.0, f32::NAN]).unwrap(),
            spacing: [1.0; 3],
            patient_id: "p".into(),
            frame_id: "f".into(),
        };
        assert!(normalize_intensity(&v).is_err());
    }

    #[test]
    fn identity_resize() {
        let s = sample(7, 9);
        assert_eq!(resize_sample(&s, (7, 9)).unwrap(), s);
    }

    #[test]
    fn upsampled_single_label_survives_without_new_classes() {
        let mut scribble = Array2::from_elem((4, 4), UNLABELED);
        scribble[[1, 2]] = 3;
        let s = SliceSample::new(Array2::zeros((4, 4)), scribble, None, provenance()).unwrap();
        let up = resize_sample(&s, (8, 8)).unwrap();
        let threes = up.scribble.iter().filter(|&&v| v == 3).count();
        assert!(threes >= 1);
        assert!(up.scribble.iter().all(|&v| v == 3 || v == UNLABELED));
    }

    #[test]
    fn corners_are_preserved_on_upsampling() {
        let s = sample(64, 64);
        let up = resize_sample(&s, (256, 256)).unwrap();
        assert_eq!(up.image[[0, 0]], s.image[[0, 0]]);
        assert_eq!(up.image[[0, 255]], s.image[[0, 63]]);
        assert_eq!(up.image[[255, 0]], s.image[[63, 0]]);
        assert_eq!(up.image[[255, 255]], s.image[[63, 63]]);
    }

    #[test]
    fn bilinear_midpoint() {
        let img = array![[0.0f32, 1.0], [1.0, 0.0]];
        let out = resize_bilinear(img.view(), (3, 3));
        assert_eq!(out[[1, 1]], 0.5);
        assert_eq!(out[[0, 1]], 0.5);
    }

    #[test]
    fn rot90_matches_numpy_convention() {
        let a = array![[1, 2], [3, 4]];
        assert_eq!(rot90(a.view(), 1), array![[2, 4], [1, 3]]);
        assert_eq!(rot90(a.view(), 2), array![[4, 3], [2, 1]]);
        assert_eq!(rot90(rot90(a.view(), 1).view(), 3), a);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let s = sample(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&s, &mut rng, &AugmentConfig::disabled()), s);
    }

    #[test]
    fn augmentation_is_deterministic() {
        let s = sample(16, 16);
        for seed in 0..20 {
            let a = augment(&s, &mut ChaCha8Rng::seed_from_u64(seed), &AugmentConfig::default());
            let b = augment(&s, &mut ChaCha8Rng::seed_from_u64(seed), &AugmentConfig::default());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn geometric_transforms_keep_pixels_paired() {
        // Encode each pixel's identity in the image so the permutation can be recovered.
        let s = sample(12, 12);
        let config = AugmentConfig {
            noise_prob: 0.0,
            rotate_prob: 1.0,
            flip_prob: 1.0,
            ..AugmentConfig::default()
        };
        for seed in 0..16 {
            let out = augment(&s, &mut ChaCha8Rng::seed_from_u64(seed), &config);
            let unlabeled = |m: &Array2<u8>| m.iter().filter(|&&v| v == UNLABELED).count();
            assert_eq!(unlabeled(&out.scribble), unlabeled(&s.scribble));
            for ((i, j), &v) in out.image.indexed_iter() {
                let idx = (v * 144.0).round() as usize;
                let (si, sj) = (idx / 12, idx % 12);
                assert_eq!(out.scribble[[i, j]], s.scribble[[si, sj]]);
                assert_eq!(out.dense.as_ref().unwrap()[[i, j]], s.dense.as_ref().unwrap()[[si, sj]]);
            }
        }
    }

    #[test]
    fn noise_stays_in_unit_range_and_spares_labels() {
        let s = sample(16, 16);
        let config = AugmentConfig {
            rotate_prob: 0.0,
            flip_prob: 0.0,
            noise_prob: 1.0,
            ..AugmentConfig::default()
        };
        let out = augment(&s, &mut ChaCha8Rng::seed_from_u64(11), &config);
        assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.scribble, s.scribble);
        assert_eq!(out.dense, s.dense);
    }

    #[test]
    fn free_rotation_introduces_no_new_classes() {
        let s = sample(16, 16);
        let config = AugmentConfig {
            rotate_prob: 1.0,
            flip_prob: 0.0,
            noise_prob: 0.0,
            free_rotation: true,
            ..AugmentConfig::default()
        };
        let out = augment(&s, &mut ChaCha8Rng::seed_from_u64(5), &config);
        assert!(out.scribble.iter().all(|&v| v < 4 || v == UNLABELED));
        assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    proptest::proptest! {
        #[test]
        fn normalization_is_affine_invariant(
            values in proptest::collection::vec(-100.0f32..100.0, 12),
            scale in 0.5f32..4.0,
            shift in -10.0f32..10.0,
        ) {
            let base = Array3::from_shape_vec((1, 3, 4), values).unwrap();
            let a = normalize_intensity(&ImageVolume::new(base.clone(), [1.0; 3], "p", "f").unwrap()).unwrap();
            let b = normalize_intensity(&ImageVolume::new(base.mapv(|v| v * scale + shift), [1.0; 3], "p", "f").unwrap()).unwrap();
            for (x, y) in a.voxels.iter().zip(b.voxels.iter()) {
                proptest::prop_assert!((0.0..=1.0).contains(x));
                proptest::prop_assert!((x - y).abs() < 1e-3);
            }
        }
    }
}
