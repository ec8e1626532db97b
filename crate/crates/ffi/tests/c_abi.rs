use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use diffseg_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ds_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn dataset_handle_lifecycle() {
    let mut ds = ptr::null_mut();
    let st = unsafe { ds_dataset_generate(cstr("lesion").as_ptr(), 10, 16, 7, 0.8, &mut ds) };
    assert_eq!(st, DsStatus::Ok);
    let (mut len, mut size) = (0, 0);
    assert_eq!(unsafe { ds_dataset_info(ds, DsSplit::Train, &mut len, &mut size) }, DsStatus::Ok);
    assert_eq!((len, size), (8, 16));
    let mut buf = vec![0.0; 256];
    assert_eq!(unsafe { ds_dataset_pixels(ds, DsSplit::Val, 1, 0, buf.as_mut_ptr(), buf.len()) }, DsStatus::Ok);
    assert!(buf.iter().all(|&v| v == 0.0 || v == 1.0) && buf.iter().any(|&v| v == 1.0));
    assert_eq!(unsafe { ds_dataset_pixels(ds, DsSplit::Val, 1, 1, buf.as_mut_ptr(), 10) }, DsStatus::BufferTooSmall);
    assert_eq!(unsafe { ds_dataset_pixels(ds, DsSplit::Val, 5, 1, buf.as_mut_ptr(), 256) }, DsStatus::Config);

    let dir = tempfile::tempdir().unwrap();
    let d = cstr(dir.path().to_str().unwrap());
    assert_eq!(unsafe { ds_dataset_save(ds, d.as_ptr()) }, DsStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { ds_dataset_load(d.as_ptr(), &mut back) }, DsStatus::Ok);
    let mut again = vec![0.0; 256];
    assert_eq!(unsafe { ds_dataset_pixels(back, DsSplit::Val, 1, 0, again.as_mut_ptr(), 256) }, DsStatus::Ok);
    assert_eq!(buf, again);
    unsafe {
        ds_dataset_free(ds);
        ds_dataset_free(back);
        ds_dataset_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { ds_dataset_generate(cstr("retina").as_ptr(), 4, 16, 0, 0.5, &mut ds) }, DsStatus::Config);
    assert!(last_error().contains("retina"));
    assert!(ds.is_null());
    assert_eq!(unsafe { ds_dataset_generate(ptr::null(), 4, 16, 0, 0.5, &mut ds) }, DsStatus::NullPointer);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ds_model_load(cstr("/nonexistent/model.ckpt").as_ptr(), &mut m) }, DsStatus::Io);
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { ds_model_load(bad.as_ptr().cast(), &mut m) }, DsStatus::InvalidUtf8);
    let mut v = 0.0;
    assert_eq!(unsafe { ds_iou([1.0, 0.5].as_ptr(), [1.0, 0.0].as_ptr(), 2, &mut v) }, DsStatus::Data);
}

#[test]
fn metrics_through_the_abi() {
    let mut v = 0.0;
    let pred = [1.0, 1.0, 0.0, 0.0];
    let gt = [1.0, 0.0, 1.0, 0.0];
    assert_eq!(unsafe { ds_iou(pred.as_ptr(), gt.as_ptr(), 4, &mut v) }, DsStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(unsafe { ds_ece([1.0, 1.0].as_ptr(), [1.0, 0.0].as_ptr(), 2, &mut v) }, DsStatus::Ok);
    assert!((v - 0.5).abs() < 1e-12);
    assert_eq!(unsafe { ds_bayes_mmse(0.3, 1.0, &mut v) }, DsStatus::Ok);
    assert!(v.abs() < 1e-9);
}

#[test]
fn train_save_load_profile() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { ds_dataset_generate(cstr("tumor").as_ptr(), 12, 8, 1, 0.75, &mut ds) }, DsStatus::Ok);
    let opts = DsTrainOptions {
        base_channels: 4,
        depth: 1,
        time_embed_dim: 8,
        diffusion_steps: 50,
        beta_start: 1e-3,
        beta_end: 0.2,
        batch_size: 4,
        train_steps: 3,
        ..ds_train_options_default(3)
    };
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { ds_train(ds, &opts, &mut m) }, DsStatus::Ok, "{}", last_error());
    let (mut steps, mut size) = (0, 0);
    assert_eq!(unsafe { ds_model_info(m, &mut steps, &mut size) }, DsStatus::Ok);
    assert_eq!((steps, size), (50, 8));

    let dir = tempfile::tempdir().unwrap();
    let path = cstr(dir.path().join("m.ckpt").to_str().unwrap());
    assert_eq!(unsafe { ds_model_save(m, path.as_ptr()) }, DsStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { ds_model_load(path.as_ptr(), &mut loaded) }, DsStatus::Ok);

    let grid = cstr("0:49:7");
    let (mut ts, mut vals, mut n) = (vec![0usize; 8], vec![0.0; 8], 0);
    assert_eq!(unsafe { ds_profile_mask_error(m, ds, grid.as_ptr(), 0, 4, 9, ts.as_mut_ptr(), vals.as_mut_ptr(), 2, &mut n) }, DsStatus::BufferTooSmall);
    assert_eq!(n, 8);
    assert_eq!(unsafe { ds_profile_mask_error(m, ds, grid.as_ptr(), 0, 4, 9, ts.as_mut_ptr(), vals.as_mut_ptr(), 8, &mut n) }, DsStatus::Ok);
    let (mut ts2, mut vals2) = (vec![0usize; 8], vec![0.0; 8]);
    assert_eq!(unsafe { ds_profile_mask_error(loaded, ds, grid.as_ptr(), 0, 4, 9, ts2.as_mut_ptr(), vals2.as_mut_ptr(), 8, &mut n) }, DsStatus::Ok);
    assert_eq!(ts, vec![1, 8, 15, 22, 29, 36, 43, 50]);
    assert_eq!((ts, vals), (ts2, vals2));

    let (mut miou, mut e) = (0.0, 0.0);
    assert_eq!(unsafe { ds_evaluate(m, ds, 2, 0, &mut miou, &mut e) }, DsStatus::Config, "x0 models cannot be ensembled");
    unsafe {
        ds_model_free(m);
        ds_model_free(loaded);
        ds_dataset_free(ds);
    }
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/diffseg.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "ds_version",
        "ds_last_error",
        "ds_dataset_generate",
        "ds_dataset_free",
        "ds_train",
        "ds_model_load",
        "ds_profile_mask_error",
        "ds_bayes_mmse",
        "typedef struct DsDataset DsDataset",
        "DS_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

/// Compiles a small C program against the generated header and the shared
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler on PATH; C link check not run");
        return;
    };
    assert!(cc.status.success());
    let exe_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = exe_dir.join("libdiffseg_ffi.so");
    if !lib.exists() {
        eprintln!("{} not built; C link check not run", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "diffseg.h"
int main(void) {
    DsDataset *ds = NULL;
    if (ds_dataset_generate("nuclei", 6, 16, 3, 0.5, &ds) != DS_STATUS_OK) return 1;
    size_t len = 0, size = 0;
    if (ds_dataset_info(ds, DS_SPLIT_TRAIN, &len, &size) != DS_STATUS_OK || len != 3 || size != 16) return 2;
    double v = -1.0;
    if (ds_bayes_mmse(0.5, 0.0, &v) != DS_STATUS_OK || v < 0.999 || v > 1.001) return 3;
    if (ds_dataset_generate("bogus", 6, 16, 3, 0.5, &ds) != DS_STATUS_CONFIG || ds_last_error() == NULL) return 4;
    ds_dataset_free(ds);
    printf("diffseg %s ok\n", ds_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg("-L")
        .arg(&exe_dir)
        .arg("-ldiffseg_ffi")
        .arg("-o")
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).env("LD_LIBRARY_PATH", &exe_dir).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).ends_with("ok\n"));
}
