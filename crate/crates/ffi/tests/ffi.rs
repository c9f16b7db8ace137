use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use nested_factor::data::{generate_canm, write_container, CanmSpec};
use nested_factor::nested::{save_model, EmbedLevel, ModelConfig, NestedVae, SavedModel};
use nested_factor::nn::arch::{ImageShape, OuterArch};
use nested_factor_ffi::*;

fn last_error() -> String {
    let p = nf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn metrics_through_the_c_abi() {
    let scores = [0.708, 0.696, 0.714, 0.738, 0.721, 0.647];
    let mut out = 0.0;
    assert_eq!(
        unsafe { nf_adjusted_parity(scores.as_ptr(), 6, &mut out) },
        NfStatus::Ok
    );
    assert!((out - 0.664).abs() < 5e-4);
    assert!(nf_last_error_message().is_null());

    assert_eq!(
        unsafe { nf_adjusted_parity(scores.as_ptr(), 1, &mut out) },
        NfStatus::Metrics
    );
    assert!(last_error().contains("two domain scores"));

    let (pred, truth) = ([1usize, 1, 0, 0], [1usize, 0, 1, 0]);
    assert_eq!(
        unsafe { nf_macro_f1(pred.as_ptr(), truth.as_ptr(), 4, 2, &mut out) },
        NfStatus::Ok
    );
    assert!((out - 0.5).abs() < 1e-12);

    assert_eq!(
        unsafe { nf_normalize_score(0.55, 2, &mut out) },
        NfStatus::Ok
    );
    assert!((out - 0.1).abs() < 1e-12);
    assert_eq!(
        unsafe { nf_normalize_score(0.5, 1, &mut out) },
        NfStatus::InvalidArgument
    );

    let a = [0.0; 4];
    let b = [0.1, 0.0, 5.0, 0.0];
    let changed = [0u8, 1];
    assert_eq!(
        unsafe {
            nf_change_detection_accuracy(a.as_ptr(), b.as_ptr(), 2, 2, changed.as_ptr(), &mut out)
        },
        NfStatus::Ok
    );
    assert_eq!(out, 1.0);
}

#[test]
fn null_pointers_are_reported() {
    let mut out = 0.0;
    assert_eq!(
        unsafe { nf_adjusted_parity(ptr::null(), 3, &mut out) },
        NfStatus::NullPointer
    );
    assert!(last_error().contains("scores"));
    assert_eq!(
        unsafe { nf_adjusted_parity([0.5, 0.5].as_ptr(), 2, ptr::null_mut()) },
        NfStatus::NullPointer
    );
    assert_eq!(unsafe { nf_dataset_len(ptr::null()) }, 0);
    unsafe {
        nf_dataset_free(ptr::null_mut());
        nf_model_free(ptr::null_mut());
    }
}

#[test]
fn dataset_and_model_handles() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CanmSpec {
        height: 4,
        width: 4,
        n_domains: 2,
        ..CanmSpec::default()
    };
    let ds = generate_canm(&spec, 5, 1).unwrap();
    let ds_path = dir.path().join("d.nfds");
    write_container(&ds_path, &ds).unwrap();
    let cfg = ModelConfig {
        image: ImageShape::new(1, 4, 4),
        arch: OuterArch::Mlp { hidden: 8 },
        latent_dim: 4,
        nested_dim: 3,
        nested_width: 6,
        ..ModelConfig::default()
    };
    let model = NestedVae::new(&cfg, 3).unwrap();
    let want = model.embed(&ds.images, EmbedLevel::Nested).unwrap();
    let ck_path = dir.path().join("m.nfck");
    save_model(
        &ck_path,
        &SavedModel::Nested(model),
        serde_json::Value::Null,
    )
    .unwrap();

    unsafe {
        let mut h: *mut NfDataset = ptr::null_mut();
        assert_eq!(
            nf_dataset_load(cpath(&ds_path).as_ptr(), &mut h),
            NfStatus::Ok
        );
        assert_eq!(nf_dataset_len(h), 10);
        let (mut c, mut y, mut x) = (0, 0, 0);
        assert_eq!(
            nf_dataset_item_shape(h, &mut c, &mut y, &mut x),
            NfStatus::Ok
        );
        assert_eq!((c, y, x), (1, 4, 4));
        let mut classes = vec![0i32; 10];
        let mut domains = vec![0i32; 10];
        assert_eq!(
            nf_dataset_labels(h, classes.as_mut_ptr(), domains.as_mut_ptr(), 10),
            NfStatus::Ok
        );
        assert_eq!(classes, ds.class_labels);
        assert_eq!(domains, ds.domain_labels);
        assert_eq!(
            nf_dataset_labels(h, classes.as_mut_ptr(), ptr::null_mut(), 9),
            NfStatus::InvalidArgument
        );

        let mut m: *mut NfModel = ptr::null_mut();
        assert_eq!(
            nf_model_load(cpath(&ck_path).as_ptr(), &mut m),
            NfStatus::Ok
        );
        let mut dim = 0;
        assert_eq!(nf_model_embedding_dim(m, &mut dim), NfStatus::Ok);
        assert_eq!(dim, 3);
        let mut e = vec![0.0; 30];
        assert_eq!(
            nf_model_embed_dataset(m, h, e.as_mut_ptr(), 30),
            NfStatus::Ok
        );
        assert_eq!(e, want.data());
        let mut e2 = vec![0.0; 30];
        assert_eq!(
            nf_model_embed(m, ds.images.data().as_ptr(), 10, e2.as_mut_ptr(), 30),
            NfStatus::Ok
        );
        assert_eq!(e2, e);
        assert_eq!(
            nf_model_embed(m, ds.images.data().as_ptr(), 10, e2.as_mut_ptr(), 29),
            NfStatus::InvalidArgument
        );
        nf_model_free(m);
        nf_dataset_free(h);
    }
}

#[test]
fn missing_files_name_the_path() {
    let missing = PathBuf::from("/nonexistent/dir/data.nfds");
    let mut h: *mut NfDataset = ptr::null_mut();
    let status = unsafe { nf_dataset_load(cpath(&missing).as_ptr(), &mut h) };
    assert_eq!(status, NfStatus::Io);
    assert!(h.is_null());
    assert!(
        last_error().contains("/nonexistent/dir/data.nfds"),
        "{}",
        last_error()
    );
    let mut m: *mut NfModel = ptr::null_mut();
    assert_eq!(
        unsafe { nf_model_load(cpath(&missing).as_ptr(), &mut m) },
        NfStatus::Model
    );
    assert!(last_error().contains("/nonexistent"));
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/nested_factor.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "nf_last_error_message",
        "nf_version",
        "nf_adjusted_parity",
        "nf_normalize_score",
        "nf_macro_f1",
        "nf_change_detection_accuracy",
        "nf_dataset_load",
        "nf_dataset_len",
        "nf_dataset_item_shape",
        "nf_dataset_labels",
        "nf_dataset_free",
        "nf_model_load",
        "nf_model_embedding_dim",
        "nf_model_embed",
        "nf_model_embed_dataset",
        "nf_model_free",
        "typedef struct NfDataset NfDataset",
        "typedef struct NfModel NfModel",
        "NF_STATUS_OK = 0",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "nested_factor.h"

int main(void) {
    double scores[6] = {0.708, 0.696, 0.714, 0.738, 0.721, 0.647};
    double out = 0.0;
    if (nf_adjusted_parity(scores, 6, &out) != NF_STATUS_OK) return 1;
    if (nf_adjusted_parity(scores, 1, &out) != NF_STATUS_METRICS) return 2;
    if (nf_last_error_message() == NULL) return 3;
    NfDataset *ds = NULL;
    if (nf_dataset_load("/nonexistent.nfds", &ds) != NF_STATUS_IO || ds != NULL) return 4;
    printf("%.3f %s\n", out, nf_version());
    return 0;
}
"#;

/// Compiles and runs a C program against the header and the static library.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libnested_factor_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("0.664 "), "{stdout}");
}
