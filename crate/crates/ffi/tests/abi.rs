use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ramen::data::TokenVocab;
use ramen::model::{Batch, RegionSet};
use ramen::train::{load_checkpoint, lr_at_epoch, Schedule};
use ramen_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ramen_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

const SMALL: &str = r#"{"data":{"num_questions":300},"trainer":{"max_epochs":1}}"#;

#[test]
fn status_codes_match_cli_exit_codes() {
    assert_eq!(RamenStatus::Ok as i32, 0);
    assert_eq!(RamenStatus::Config as i32, 2);
    assert_eq!(RamenStatus::Data as i32, 3);
    assert_eq!(RamenStatus::Numeric as i32, 4);
    assert_eq!(RamenStatus::Checkpoint as i32, 5);
    assert_eq!(RamenStatus::Io as i32, 6);
    let name = unsafe { CStr::from_ptr(ramen_status_name(RamenStatus::Checkpoint)) };
    assert_eq!(name.to_str().unwrap(), "checkpoint error");
}

#[test]
fn lr_matches_library_schedule() {
    for e in 1..=20 {
        assert_eq!(ramen_lr_at_epoch(e), lr_at_epoch(&Schedule::default(), e as usize));
    }
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    unsafe {
        assert_eq!(
            ramen_dataset_read(ptr::null(), ptr::null_mut()),
            RamenStatus::NullArgument
        );
        assert!(last_error().contains("dir"));
        let mut n = 0usize;
        assert_eq!(ramen_dataset_validate(ptr::null(), &mut n), RamenStatus::NullArgument);
        assert_eq!(ramen_dataset_num_items(ptr::null()), 0);
        assert_eq!(ramen_model_num_answers(ptr::null()), 0);
        assert!(ramen_model_answer(ptr::null(), 0).is_null());
        ramen_dataset_free(ptr::null_mut());
        ramen_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_map_to_their_categories() {
    unsafe {
        let mut ds = ptr::null_mut();
        let bad = c(r#"{"num_questions": 10, "bogus": 1}"#);
        assert_eq!(ramen_dataset_generate(bad.as_ptr(), &mut ds), RamenStatus::Config);
        assert!(last_error().contains("bogus"));
        assert!(ds.is_null());

        let dir = tempfile::tempdir().unwrap();
        let missing = c(dir.path().join("nope").to_str().unwrap());
        assert_eq!(ramen_dataset_read(missing.as_ptr(), &mut ds), RamenStatus::Io);

        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint at all").unwrap();
        let mut m = ptr::null_mut();
        let junk = c(junk.to_str().unwrap());
        assert_eq!(ramen_model_load(junk.as_ptr(), &mut m), RamenStatus::Checkpoint);
        assert!(m.is_null());

        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(
            ramen_dataset_read(invalid.as_ptr().cast(), &mut ds),
            RamenStatus::InvalidUtf8
        );
    }
}

#[test]
fn dataset_round_trips_through_the_handle_api() {
    let dir = tempfile::tempdir().unwrap();
    let out = c(dir.path().to_str().unwrap());
    unsafe {
        let mut ds = ptr::null_mut();
        let cfg = c(r#"{"num_questions": 200, "seed": 3}"#);
        assert_eq!(ramen_dataset_generate(cfg.as_ptr(), &mut ds), RamenStatus::Ok);
        assert!(ramen_last_error().is_null());
        let items = ramen_dataset_num_items(ds);
        assert!(items > 0);
        let mut bad = usize::MAX;
        assert_eq!(ramen_dataset_validate(ds, &mut bad), RamenStatus::Ok);
        assert_eq!(bad, 0);
        assert_eq!(ramen_dataset_write(ds, out.as_ptr()), RamenStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(ramen_dataset_read(out.as_ptr(), &mut back), RamenStatus::Ok);
        assert_eq!(ramen_dataset_num_items(back), items);
        assert_eq!(ramen_dataset_num_scenes(back), ramen_dataset_num_scenes(ds));
        ramen_dataset_free(ds);
        ramen_dataset_free(back);
    }
}

fn trained(dir: &Path) -> CString {
    let cfg = c(SMALL);
    let out = c(dir.to_str().unwrap());
    let mut best = -1.0;
    let st = unsafe { ramen_train(cfg.as_ptr(), out.as_ptr(), &mut best) };
    assert_eq!(st, RamenStatus::Ok, "{}", last_error());
    assert!((0.0..=1.0).contains(&best));
    c(dir.join("best.ckpt").to_str().unwrap())
}

#[test]
fn loaded_model_predicts_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained(dir.path());
    let reference = load_checkpoint::<f32>(Path::new(path.to_str().unwrap()), None).unwrap();
    let mut lib = reference.model;
    lib.set_training(false);

    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(ramen_model_load(path.as_ptr(), &mut m), RamenStatus::Ok);
        let n = ramen_model_num_answers(m);
        assert_eq!(n, reference.vocab.answers.len());
        for (i, a) in reference.vocab.answers.iter().enumerate() {
            assert_eq!(CStr::from_ptr(ramen_model_answer(m, i)).to_str().unwrap(), a);
        }
        assert!(ramen_model_answer(m, n).is_null());

        let dim = ramen_model_region_dim(m);
        let regions: Vec<f32> = (0..3 * dim).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect();
        let mut got = usize::MAX;
        let q = c("Is there a red cube?");
        assert_eq!(
            ramen_model_predict(m, regions.as_ptr(), 3, q.as_ptr(), &mut got),
            RamenStatus::Ok
        );
        assert!(got < n);

        let set = RegionSet::new(3, dim, regions).unwrap();
        let tokens = TokenVocab::new().encode("is there a red cube");
        let batch = Batch::<f32>::new(&[&set], vec![tokens]).unwrap();
        assert_eq!(lib.predict(&batch).unwrap()[0], got);

        assert_eq!(
            ramen_model_predict(m, ptr::null(), 3, q.as_ptr(), &mut got),
            RamenStatus::NullArgument
        );
        ramen_model_free(m);
    }
}

#[test]
fn grad_check_passes_through_the_abi() {
    let mut passed = 0;
    let mut worst = f64::NAN;
    assert_eq!(unsafe { ramen_grad_check(0, &mut passed, &mut worst) }, RamenStatus::Ok);
    assert_eq!(passed, 1);
    assert!(worst.is_finite() && worst < 1e-3);
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ramen.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "ramen_model_load",
        "ramen_model_predict",
        "ramen_dataset_generate",
        "ramen_train",
        "RAMEN_STATUS_PANIC",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
