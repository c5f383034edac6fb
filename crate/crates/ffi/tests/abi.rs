use std::ffi::{CStr, CString};
use std::ptr;

use genlie_core::gradcheck::fixture;
use genlie_core::model::{write_checkpoint, ModelDims};
use genlie_core::preprocess::{preprocess, PreprocessConfig, Strategy};
use genlie_core::synth::{generate_corpus, SynthConfig};
use genlie_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(genlie_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn corpus_selection_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_speakers: 2,
        videos_per_speaker: 2,
        ..SynthConfig::default()
    };
    let (manifest, _) = generate_corpus(&cfg).unwrap();
    let path = CString::new(manifest.write_to_dir(dir.path()).unwrap().to_str().unwrap()).unwrap();

    let mut corpus = ptr::null_mut();
    assert_eq!(unsafe { genlie_corpus_load(path.as_ptr(), &mut corpus) }, GenlieStatus::Ok);
    let mut len = 0;
    assert_eq!(unsafe { genlie_corpus_len(corpus, &mut len) }, GenlieStatus::Ok);
    assert_eq!(len, 4);

    let mut needed = 0;
    let status = unsafe { genlie_select_frames(corpus, 1, GenlieStrategy::Au, 8, 16, ptr::null_mut(), 0, &mut needed) };
    assert_eq!(status, GenlieStatus::BufferTooSmall);
    assert_eq!(needed, 128);

    let mut buf = vec![0usize; needed];
    let status =
        unsafe { genlie_select_frames(corpus, 1, GenlieStrategy::Au, 8, 16, buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(status, GenlieStatus::Ok);
    let pc = PreprocessConfig {
        strategy: Strategy::Au,
        ..PreprocessConfig::default()
    };
    let expected: Vec<usize> = preprocess(&manifest.videos()[1], &pc).unwrap().all_indices().collect();
    assert_eq!(buf, expected);

    let status = unsafe { genlie_select_frames(corpus, 9, GenlieStrategy::Au, 8, 16, buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(status, GenlieStatus::OutOfRange);
    assert!(last_error().contains("out of range"));
    unsafe { genlie_corpus_free(corpus) };
}

#[test]
fn model_predicts_a_probability() {
    let dir = tempfile::tempdir().unwrap();
    let dims = ModelDims {
        d: 6,
        hidden: 5,
        d_out: 4,
        n_speakers: 3,
    };
    let (params, samples) = fixture(1, dims, 2).unwrap();
    let file = dir.path().join("m.glm");
    write_checkpoint(&file, &params).unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { genlie_model_load(path.as_ptr(), &mut model) }, GenlieStatus::Ok);
    let (mut d, mut h, mut o, mut c) = (0, 0, 0, 0);
    assert_eq!(unsafe { genlie_model_dims(model, &mut d, &mut h, &mut o, &mut c) }, GenlieStatus::Ok);
    assert_eq!((d, h, o, c), (6, 5, 4, 3));

    let x = &samples[0].pooled;
    let mut prob = -1.0;
    assert_eq!(unsafe { genlie_model_predict(model, x.as_ptr(), x.len(), 1, &mut prob) }, GenlieStatus::Ok);
    assert!((0.0..=1.0).contains(&prob));

    let status = unsafe { genlie_model_predict(model, x.as_ptr(), 3, 1, &mut prob) };
    assert_eq!(status, GenlieStatus::Dimension);
    let status = unsafe { genlie_model_predict(model, x.as_ptr(), x.len(), 0, &mut prob) };
    assert_eq!(status, GenlieStatus::Dimension);
    unsafe { genlie_model_free(model) };
}

#[test]
fn metrics_and_errors() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut out = 0.0;
    assert_eq!(unsafe { genlie_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut out) }, GenlieStatus::Ok);
    assert_eq!(out, 75.0);
    let preds = [0u8, 1, 1, 1];
    assert_eq!(unsafe { genlie_accuracy(preds.as_ptr(), labels.as_ptr(), 4, &mut out) }, GenlieStatus::Ok);
    assert_eq!(out, 75.0);
    assert_eq!(unsafe { genlie_f1(preds.as_ptr(), labels.as_ptr(), 4, &mut out) }, GenlieStatus::Ok);
    assert_eq!(out, 80.0);

    let single = [1u8; 4];
    assert_eq!(unsafe { genlie_auc(scores.as_ptr(), single.as_ptr(), 4, &mut out) }, GenlieStatus::UndefinedAuc);
    assert_eq!(unsafe { genlie_auc(scores.as_ptr(), labels.as_ptr(), 4, ptr::null_mut()) }, GenlieStatus::NullPointer);
    assert!(last_error().contains("out"));

    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.glm").unwrap();
    assert_eq!(unsafe { genlie_model_load(missing.as_ptr(), &mut model) }, GenlieStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/model.glm"));
    let bad_utf8 = [0xffu8, 0];
    assert_eq!(
        unsafe { genlie_model_load(bad_utf8.as_ptr().cast(), &mut model) },
        GenlieStatus::InvalidUtf8
    );
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/genlie.h")).unwrap();
    for symbol in [
        "genlie_last_error",
        "genlie_corpus_load",
        "genlie_select_frames",
        "genlie_model_predict",
        "genlie_auc",
        "GENLIE_STATUS_BUFFER_TOO_SMALL",
        "typedef struct GenlieModel GenlieModel",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}
