use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use msvq::pipeline::commands::{self, TrainOverrides};
use msvq::pipeline::{PipelineConfig, SyntheticSpec};
use msvq::msmc::StageSpec;
use msvq_ffi::*;

fn last_error() -> String {
    let p = msvq_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn codebook_quantize_round_trip() {
    // Two heads, three codewords, dimension 2.
    let data = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0, -5.0, 5.0, 5.0, -5.0];
    let mut cb = ptr::null_mut();
    assert_eq!(unsafe { msvq_codebook_new(2, 3, 2, data.as_ptr(), &mut cb) }, MsvqStatus::Ok);
    let (mut h, mut k, mut d) = (0, 0, 0);
    assert_eq!(unsafe { msvq_codebook_dims(cb, &mut h, &mut k, &mut d) }, MsvqStatus::Ok);
    assert_eq!((h, k, d), (2, 3, 2));

    let x = [0.9, 0.1, -4.0, 4.5];
    let mut idx = [0u32; 2];
    let mut q = [0.0; 4];
    assert_eq!(unsafe { msvq_quantize(cb, x.as_ptr(), 4, idx.as_mut_ptr(), 2, q.as_mut_ptr()) }, MsvqStatus::Ok);
    assert_eq!(idx, [1, 1]);
    assert_eq!(q, [1.0, 0.0, -5.0, 5.0]);

    let mut back = [0.0; 4];
    assert_eq!(unsafe { msvq_dequantize(cb, idx.as_ptr(), 2, back.as_mut_ptr(), 4) }, MsvqStatus::Ok);
    assert_eq!(back, q);

    let bad = [0u32, 3];
    assert_eq!(unsafe { msvq_dequantize(cb, bad.as_ptr(), 2, back.as_mut_ptr(), 4) }, MsvqStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));
    assert_eq!(unsafe { msvq_quantize(cb, x.as_ptr(), 4, idx.as_mut_ptr(), 1, ptr::null_mut()) }, MsvqStatus::BufferTooSmall);
    unsafe { msvq_codebook_free(cb) };
}

#[test]
fn null_pointers_are_reported() {
    let mut out = 0.0;
    assert_eq!(unsafe { msvq_mcd(ptr::null(), ptr::null(), &mut out) }, MsvqStatus::NullPointer);
    assert!(last_error().contains("null"));
    let mut cb = ptr::null_mut();
    assert_eq!(unsafe { msvq_codebook_load(ptr::null(), &mut cb) }, MsvqStatus::NullPointer);
    unsafe { msvq_codebook_free(ptr::null_mut()) };
}

#[test]
fn metrics() {
    let r = CString::new("kitten").unwrap();
    let h = CString::new("sitting").unwrap();
    let mut er = 0.0;
    assert_eq!(unsafe { msvq_error_rate(r.as_ptr(), h.as_ptr(), 0, &mut er) }, MsvqStatus::Ok);
    assert!((er - 0.5).abs() < 1e-15);
    assert!(msvq_last_error_message().is_null());

    let a = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let mut fd = -1.0;
    assert_eq!(unsafe { msvq_frechet_distance(a.as_ptr(), 3, a.as_ptr(), 3, 2, 10.0, &mut fd) }, MsvqStatus::Ok);
    assert!(fd.abs() < 1e-9);
    assert_eq!(
        unsafe { msvq_frechet_distance(a.as_ptr(), 1, a.as_ptr(), 3, 2, 1.0, &mut fd) },
        MsvqStatus::InvalidInput
    );
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.stages = vec![
        StageSpec { rate: 1, heads: 2, codewords: 4, head_dim: 2 },
        StageSpec { rate: 2, heads: 2, codewords: 4, head_dim: 2 },
    ];
    cfg.ema.epochs = 3;
    cfg.associate.codebook_size = 8;
    cfg.synthetic = Some(SyntheticSpec {
        num_clusters: 4,
        cluster_std: 0.05,
        dim: 4,
        frames_per_utterance: 12,
        num_utterances: 4,
        seed: 3,
        sine: None,
    });
    cfg
}

#[test]
fn model_file_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let art = dir.path().join("art");
    let cfg = small_config();
    commands::cmd_synth(&cfg, None, &corpus, &mut Vec::new()).unwrap();
    commands::cmd_train(&cfg, &corpus, &art, &TrainOverrides::default(), &mut Vec::new()).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { msvq_model_load(cstr(&art).as_ptr(), &mut model) }, MsvqStatus::Ok);
    let (mut s, mut bits) = (0, 0.0);
    assert_eq!(unsafe { msvq_model_info(model, &mut s, &mut bits) }, MsvqStatus::Ok);
    assert_eq!((s, bits), (2, 6.0));

    let feat = corpus.join("utt_0000.msfq");
    let rep = dir.path().join("a.msmr");
    let dec = dir.path().join("a.msfq");
    let code = dir.path().join("a.mscc");
    let rec = dir.path().join("b.msmr");
    unsafe {
        assert_eq!(msvq_encode_file(model, cstr(&feat).as_ptr(), cstr(&rep).as_ptr()), MsvqStatus::Ok);
        assert_eq!(msvq_decode_file(model, cstr(&rep).as_ptr(), cstr(&dec).as_ptr()), MsvqStatus::Ok);
        assert_eq!(msvq_compress_file(model, cstr(&rep).as_ptr(), cstr(&code).as_ptr()), MsvqStatus::Ok);
        assert_eq!(msvq_reconstruct_file(model, cstr(&code).as_ptr(), cstr(&rec).as_ptr()), MsvqStatus::Ok);
    }

    let (mut fa, mut fb) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(msvq_features_load(cstr(&feat).as_ptr(), &mut fa), MsvqStatus::Ok);
        assert_eq!(msvq_features_load(cstr(&dec).as_ptr(), &mut fb), MsvqStatus::Ok);
    }
    let (mut t, mut d) = (0, 0);
    assert_eq!(unsafe { msvq_features_dims(fb, &mut t, &mut d) }, MsvqStatus::Ok);
    assert_eq!((t, d), (12, 4));
    let mut buf = vec![0.0; t * d];
    assert_eq!(unsafe { msvq_features_copy(fb, buf.as_mut_ptr(), buf.len()) }, MsvqStatus::Ok);
    assert!(buf.iter().all(|v| v.is_finite()));
    let mut mcd = -1.0;
    assert_eq!(unsafe { msvq_mcd(fa, fa, &mut mcd) }, MsvqStatus::Ok);
    assert_eq!(mcd, 0.0);
    unsafe {
        msvq_features_free(fa);
        msvq_features_free(fb);
    }

    // A model trained with another seed has different codebooks.
    let other = dir.path().join("other");
    let ov = TrainOverrides { seed: Some(99), ..Default::default() };
    commands::cmd_train(&cfg, &corpus, &other, &ov, &mut Vec::new()).unwrap();
    let mut model2 = ptr::null_mut();
    assert_eq!(unsafe { msvq_model_load(cstr(&other).as_ptr(), &mut model2) }, MsvqStatus::Ok);
    let out = dir.path().join("c.msfq");
    assert_eq!(
        unsafe { msvq_decode_file(model2, cstr(&rep).as_ptr(), cstr(&out).as_ptr()) },
        MsvqStatus::FingerprintMismatch
    );
    assert!(last_error().contains("fingerprint"));
    let missing = dir.path().join("missing");
    let mut m3 = ptr::null_mut();
    assert_eq!(unsafe { msvq_model_load(cstr(&missing).as_ptr(), &mut m3) }, MsvqStatus::Io);
    unsafe {
        msvq_model_free(model);
        msvq_model_free(model2);
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/msvq.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["msvq_quantize", "msvq_model_load", "msvq_last_error_message", "MSVQ_STATUS_FINGERPRINT_MISMATCH"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
