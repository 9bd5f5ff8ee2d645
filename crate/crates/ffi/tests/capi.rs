use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use pointspot::decode::{decode, DecodeConfig};
use pointspot::model::{ModelConfig, Weights};
use pointspot::synth::{render_scene, SceneSpec};
use pointspot::train::checkpoint::{save, Checkpoint};
use pointspot_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ps_last_error()) }.to_str().unwrap().to_string()
}

fn saved_model(dir: &Path) -> Weights<f32> {
    let weights = Weights::<f32>::init(&ModelConfig::micro(), 7).unwrap();
    let ck = Checkpoint { weights: weights.clone(), train: None, optimizer: None, step: 0, seed: 7 };
    save(&ck, dir).unwrap();
    weights
}

fn load(dir: &Path) -> *mut PsModel {
    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ps_model_load(path.as_ptr(), &mut model) }, PsStatus::Ok, "{}", last_error());
    model
}

#[test]
fn loop_counts_match_reference_capacity() {
    let c = ps_loop_counts(60, 25);
    assert_eq!((c.joint, c.split, c.reduction), (1621, 146, 1475));
    assert_eq!(format!("{:.1}", 100.0 * c.reduction_rate), "91.0");
}

#[test]
fn decoding_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let weights = saved_model(dir.path());
    let model = load(dir.path());
    let mut side = 0;
    assert_eq!(unsafe { ps_model_image_side(model, &mut side) }, PsStatus::Ok);
    assert_eq!(side, 16);

    let spec = SceneSpec { side: 16, instances: [1, 2], scale: [1.0, 1.0], word_len: [1, 2], charset: "abcdef".into(), n_bins: 16, min_separation: 3.0, ..Default::default() };
    let scene = render_scene(&spec, 4).unwrap();
    let bytes = scene.image.to_gray_bytes();
    // The library sees the same quantized pixels.
    let image = pointspot::image::Image::from_gray_bytes(16, 16, &bytes).unwrap();
    let expected = decode(&weights, &image, &DecodeConfig::default()).unwrap().predictions;

    let mut preds = ptr::null_mut();
    let st = unsafe { ps_decode_gray(model, bytes.as_ptr(), 16, 16, 0.0, &mut preds) };
    assert_eq!(st, PsStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { ps_predictions_len(preds) }, expected.len());
    for (i, e) in expected.iter().enumerate() {
        let mut p = PsPrediction { x: 0.0, y: 0.0, has_point: 0, score: 0.0, transcript: ptr::null() };
        assert_eq!(unsafe { ps_prediction_get(preds, i, &mut p) }, PsStatus::Ok);
        let text = unsafe { CStr::from_ptr(p.transcript) }.to_str().unwrap();
        assert_eq!(text, e.transcript);
        assert_eq!(p.has_point, 1);
        assert_eq!([p.x, p.y], e.point.unwrap());
        assert_eq!(p.score, e.score);
    }
    let mut p = PsPrediction { x: 0.0, y: 0.0, has_point: 0, score: 0.0, transcript: ptr::null() };
    assert_eq!(unsafe { ps_prediction_get(preds, expected.len(), &mut p) }, PsStatus::OutOfRange);
    assert!(last_error().contains("index"));
    unsafe {
        ps_predictions_free(preds);
        ps_model_free(model);
    }
}

#[test]
fn larger_images_report_points_in_their_own_frame() {
    let dir = tempfile::tempdir().unwrap();
    saved_model(dir.path());
    let model = load(dir.path());
    let bytes = vec![128u8; 32 * 24];
    let mut preds = ptr::null_mut();
    assert_eq!(unsafe { ps_decode_gray(model, bytes.as_ptr(), 24, 32, 0.0, &mut preds) }, PsStatus::Ok);
    for i in 0..unsafe { ps_predictions_len(preds) } {
        let mut p = PsPrediction { x: 0.0, y: 0.0, has_point: 0, score: 0.0, transcript: ptr::null() };
        unsafe { ps_prediction_get(preds, i, &mut p) };
        assert!((0.0..=32.0).contains(&p.x) && (0.0..=32.0).contains(&p.y));
    }
    unsafe {
        ps_predictions_free(preds);
        ps_model_free(model);
    }
}

#[test]
fn bad_arguments_return_codes_and_messages() {
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ps_model_load(ptr::null(), &mut model) }, PsStatus::NullArgument);
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/checkpoint").unwrap();
    assert_eq!(unsafe { ps_model_load(missing.as_ptr(), &mut model) }, PsStatus::Io);
    assert!(last_error().contains("manifest.json"));
    assert!(model.is_null());

    let dir = tempfile::tempdir().unwrap();
    saved_model(dir.path());
    std::fs::write(dir.path().join("manifest.json"), "{}").unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ps_model_load(path.as_ptr(), &mut model) }, PsStatus::Checkpoint);

    saved_model(dir.path());
    let model = load(dir.path());
    let mut preds = ptr::null_mut();
    let px = [0u8; 4];
    assert_eq!(unsafe { ps_decode_gray(model, px.as_ptr(), 0, 4, 0.0, &mut preds) }, PsStatus::InvalidArgument);
    assert_eq!(unsafe { ps_decode_gray(model, px.as_ptr(), 2, 2, 1.5, &mut preds) }, PsStatus::InvalidArgument);
    assert!(last_error().contains("threshold"));
    assert_eq!(unsafe { ps_decode_gray(model, ptr::null(), 2, 2, 0.0, &mut preds) }, PsStatus::NullArgument);
    assert_eq!(unsafe { ps_decode_gray(ptr::null(), px.as_ptr(), 2, 2, 0.0, &mut preds) }, PsStatus::NullArgument);
    assert_eq!(unsafe { ps_decode_gray(model, px.as_ptr(), 2, 2, 0.0, &mut preds) }, PsStatus::Ok);
    assert_eq!(last_error(), "");
    assert_eq!(unsafe { ps_predictions_len(ptr::null()) }, 0);
    unsafe {
        ps_predictions_free(preds);
        ps_predictions_free(ptr::null_mut());
        ps_model_free(model);
        ps_model_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pointspot.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "ps_last_error",
        "ps_model_load",
        "ps_model_free",
        "ps_model_image_side",
        "ps_decode_gray",
        "ps_predictions_len",
        "ps_prediction_get",
        "ps_predictions_free",
        "ps_loop_counts",
        "typedef struct PsModel PsModel;",
        "PS_STATUS_NULL_ARGUMENT = 1",
    ] {
        assert!(text.contains(name), "missing {}", name);
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
