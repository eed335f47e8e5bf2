use std::ffi::{CStr, CString};
use std::ptr;

use scribble_seg::model::{init_params, save_checkpoint, ModelConfig};
use scribble_seg_ffi::*;

fn last_error() -> String {
    let p = scs_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(scs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dice_and_hausdorff() {
    let mut a = [0u8; 8];
    let mut b = [0u8; 8];
    a[1] = 1;
    b[4] = 7;
    let mut dsc = -1.0;
    assert_eq!(unsafe { scs_dsc3d(a.as_ptr(), a.as_ptr(), 1, 1, 8, &mut dsc) }, ScsStatus::Ok);
    assert_eq!(dsc, 1.0);
    assert_eq!(unsafe { scs_dsc3d(a.as_ptr(), b.as_ptr(), 1, 1, 8, &mut dsc) }, ScsStatus::Ok);
    assert_eq!(dsc, 0.0);

    let spacing = [1.0, 1.0, 1.0];
    let mut mm = -1.0;
    let mut sentinel = true;
    let status = unsafe { scs_hd95(a.as_ptr(), b.as_ptr(), 1, 1, 8, spacing.as_ptr(), &mut mm, &mut sentinel) };
    assert_eq!(status, ScsStatus::Ok);
    assert_eq!(mm, 3.0);
    assert!(!sentinel);

    let empty = [0u8; 8];
    let status = unsafe { scs_hd95(empty.as_ptr(), b.as_ptr(), 1, 1, 8, spacing.as_ptr(), &mut mm, ptr::null_mut()) };
    assert_eq!(status, ScsStatus::Ok);
    assert_eq!(mm, (1.0f64 + 1.0 + 64.0).sqrt());
}

#[test]
fn errors_are_reported() {
    let a = [0u8; 4];
    let mut out = 0.0;
    assert_eq!(unsafe { scs_dsc3d(ptr::null(), a.as_ptr(), 1, 2, 2, &mut out) }, ScsStatus::NullPointer);
    assert!(last_error().contains("pred"));
    assert_eq!(unsafe { scs_dsc3d(a.as_ptr(), a.as_ptr(), 0, 2, 2, &mut out) }, ScsStatus::InvalidArgument);
    let bad = [0.0, 1.0, 1.0];
    let status = unsafe { scs_hd95(a.as_ptr(), a.as_ptr(), 1, 2, 2, bad.as_ptr(), &mut out, ptr::null_mut()) };
    assert_eq!(status, ScsStatus::InvalidArgument);
    assert!(last_error().contains("spacing"));

    let mut model = ptr::null_mut();
    let missing = CString::new("/no/such/checkpoint").unwrap();
    assert_eq!(unsafe { scs_model_load(missing.as_ptr(), &mut model) }, ScsStatus::Format);
    assert!(model.is_null());
    assert_eq!(unsafe { scs_model_init(1, 8, 4, 0, &mut model) }, ScsStatus::InvalidArgument);
}

#[test]
fn segments_with_a_saved_checkpoint() {
    let config = ModelConfig {
        levels: 2,
        base_width: 4,
        ..ModelConfig::default()
    };
    let params = init_params::<f32>(&config, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &params, 0, "h").unwrap();

    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { scs_model_load(path.as_ptr(), &mut model) }, ScsStatus::Ok);
    assert_eq!(unsafe { scs_model_num_classes(model) }, 4);

    let (d, h, w) = (3, 20, 24);
    let image: Vec<f32> = (0..d * h * w).map(|i| (i % 17) as f32).collect();
    let mut labels = vec![255u8; d * h * w];
    for decoder in [ScsDecoder::Main, ScsDecoder::Aux] {
        let status = unsafe { scs_model_segment(model, image.as_ptr(), d, h, w, 16, decoder, labels.as_mut_ptr()) };
        assert_eq!(status, ScsStatus::Ok);
        assert!(labels.iter().all(|&v| v < 4));
    }
    let status = unsafe { scs_model_segment(model, image.as_ptr(), d, h, w, 15, ScsDecoder::Main, labels.as_mut_ptr()) };
    assert_eq!(status, ScsStatus::InvalidArgument);
    unsafe { scs_model_free(model) };
    unsafe { scs_model_free(ptr::null_mut()) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/scribble_seg.h")).unwrap();
    for name in [
        "scs_last_error",
        "scs_version",
        "scs_model_load",
        "scs_model_init",
        "scs_model_free",
        "scs_model_segment",
        "scs_dsc3d",
        "scs_hd95",
        "SCS_STATUS_NULL_POINTER",
        "typedef struct ScsModel ScsModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
