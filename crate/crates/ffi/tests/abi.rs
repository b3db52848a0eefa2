use std::ffi::{c_char, CString};
use std::ptr;

use atx::*;
use atx_core::model::{build_densenet_scaled, ArchConfig, CheckpointMeta, HeadKind, Model};

fn last_error() -> String {
    let n = unsafe { atx_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n + 1];
    unsafe { atx_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n].iter().map(|&b| b as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn auc_and_errors() {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut auc = 0.0;
    assert_eq!(unsafe { atx_roc_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut auc) }, AtxStatus::Ok);
    assert_eq!(auc, 0.75);

    let one_class = [1u8; 4];
    assert_eq!(unsafe { atx_roc_auc(scores.as_ptr(), one_class.as_ptr(), 4, &mut auc) }, AtxStatus::Metric);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { atx_roc_auc(ptr::null(), labels.as_ptr(), 4, &mut auc) }, AtxStatus::NullPointer);
    assert!(last_error().contains("scores"));

    // truncation keeps a terminator
    let mut small = [1 as c_char; 4];
    let full = unsafe { atx_last_error_message(small.as_mut_ptr(), 4) };
    assert!(full > 3);
    assert_eq!(small[3], 0);
}

#[test]
fn multilabel_and_f1() {
    let scores = [0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.4, 0.6];
    let labels = [1u8, 0, 0, 1, 1, 0, 0, 1];
    let mut m = 0.0;
    assert_eq!(unsafe { atx_mean_multilabel_auc(scores.as_ptr(), labels.as_ptr(), 4, 2, &mut m) }, AtxStatus::Ok);
    assert_eq!(m, 1.0);
    let p = [0u32, 1, 1, 2];
    let mut f1 = 0.0;
    assert_eq!(unsafe { atx_weighted_f1(p.as_ptr(), p.as_ptr(), 4, 3, &mut f1) }, AtxStatus::Ok);
    assert_eq!(f1, 1.0);
}

#[test]
fn attention_loss_and_schedule() {
    let a = [1.0, 0.0, 0.0, 0.0];
    let b = [0.0, 1.0, 0.0, 0.0];
    let mut l = -1.0;
    assert_eq!(unsafe { atx_attention_loss(a.as_ptr(), a.as_ptr(), 1, 1, 2, 2, &mut l) }, AtxStatus::Ok);
    assert!(l.abs() < 1e-12);
    assert_eq!(unsafe { atx_attention_loss(a.as_ptr(), b.as_ptr(), 1, 1, 2, 2, &mut l) }, AtxStatus::Ok);
    assert!((l - 2f64.sqrt()).abs() < 1e-9);
    assert_eq!(atx_lr_schedule(0, 5e-5, 16), 5e-5);
    assert_eq!(atx_lr_schedule(16, 5e-5, 16), 2.5e-5);
    assert_eq!(atx_lr_schedule(47, 5e-5, 16), 1.25e-5);
}

#[test]
fn model_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = ArchConfig::scaled(4, 2, vec![1, 1], 3, HeadKind::SoftmaxMulticlass);
    let model: Model = build_densenet_scaled(&cfg, 1).unwrap();
    model.save_checkpoint(&path, &CheckpointMeta::default()).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut AtxModel = ptr::null_mut();
    assert_eq!(unsafe { atx_model_load(cpath.as_ptr(), &mut h) }, AtxStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { atx_model_param_count(h, &mut n) }, AtxStatus::Ok);
    assert_eq!(n, model.param_count());
    let (mut c, mut hh, mut w) = (0, 0, 0);
    assert_eq!(unsafe { atx_model_attention_shape(h, 32, 32, &mut c, &mut hh, &mut w) }, AtxStatus::Ok);
    assert_eq!((c, hh, w), model.attention_shape(32, 32).unwrap());

    let images = vec![0.25f32; 2 * 3 * 32 * 32];
    let mut probs = [0.0f64; 6];
    assert_eq!(unsafe { atx_model_predict(h, images.as_ptr(), 2, 32, 32, probs.as_mut_ptr(), 6) }, AtxStatus::Ok);
    for row in probs.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(unsafe { atx_model_predict(h, images.as_ptr(), 2, 32, 32, probs.as_mut_ptr(), 5) }, AtxStatus::InvalidArgument);
    unsafe { atx_model_free(h) };

    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    let mut h2: *mut AtxModel = ptr::null_mut();
    assert_ne!(unsafe { atx_model_load(missing.as_ptr(), &mut h2) }, AtxStatus::Ok);
    assert!(h2.is_null());
    unsafe { atx_model_free(ptr::null_mut()) };
}

#[test]
fn manifest_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let mut text = String::from("image_path,patient_id,A,B\n");
    for i in 0..20 {
        text.push_str(&format!("img{i}.png,p{},{},{}\n", i / 2, i % 2, (i / 2) % 2));
    }
    std::fs::write(&path, text).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut AtxManifest = ptr::null_mut();
    assert_eq!(unsafe { atx_manifest_load(cpath.as_ptr(), &mut h) }, AtxStatus::Ok, "{}", last_error());
    let (mut len, mut k) = (0, 0);
    unsafe {
        assert_eq!(atx_manifest_len(h, &mut len), AtxStatus::Ok);
        assert_eq!(atx_manifest_num_classes(h, &mut k), AtxStatus::Ok);
    }
    assert_eq!((len, k), (20, 2));
    let mut counts = [0usize; 3];
    assert_eq!(unsafe { atx_manifest_split_counts(h, 0.6, 0.2, 0.2, 1, counts.as_mut_ptr()) }, AtxStatus::Ok, "{}", last_error());
    assert_eq!(counts.iter().sum::<usize>(), 20);
    assert!(counts.iter().all(|c| c % 2 == 0), "patients stay whole");
    unsafe { atx_manifest_free(h) };
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/atx.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ return atx_lr_schedule(0, 1.0, 1) == 1.0 ? 0 : 1; }}\n")).unwrap();
    let status = std::process::Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status();
    match status {
        Ok(s) => assert!(s.success()),
        Err(e) => eprintln!("no C compiler available: {e}"),
    }
}
