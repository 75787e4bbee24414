use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use flux_core::fluxvit::{bind, forward, init_params, FluxViTConfig};
use flux_core::sampling::{candidates, patchify, sample_grid, SamplerConfig, SamplingGrid};
use flux_core::selector::{dynamic_scores, select_group_dynamic, NormOrder};
use flux_core::tokenopt::{flops, vit_shape};
use flux_core::videogen::{gen_video, GenSpec};
use flux_core::{Graph, Tensor};
use flux_ffi::*;

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { flux_string_free(p) };
    s
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(flux_last_error()) }.to_str().unwrap().to_owned()
}

#[test]
fn flops_json_matches_the_library() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { flux_flops_json(384, 12, 2048, &mut out) }, FluxStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
    let report = flops(&vit_shape(384, 12), 2048);
    assert_eq!(v["total"].as_u64().unwrap(), report.total);
    assert!((v["gflops"].as_f64().unwrap() - report.gflops()).abs() < 1e-12);
}

#[test]
fn sampler_calls_match_the_library() {
    let cfg = SamplerConfig::default();
    let json = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { flux_sampler_candidates_json(json.as_ptr(), &mut out) }, FluxStatus::Ok);
    let got: Vec<SamplingGrid> = serde_json::from_str(&take_string(out)).unwrap();
    assert_eq!(got, candidates(&cfg).unwrap());

    for seed in 0..20 {
        let mut g = FluxGrid::default();
        assert_eq!(unsafe { flux_sample_grid(json.as_ptr(), seed, &mut g) }, FluxStatus::Ok);
        assert_eq!(g, sample_grid(seed, &cfg).unwrap().into());
    }
}

#[test]
fn bad_sampler_json_is_an_argument_error() {
    let json = CString::new("{\"f_min\": \"eight\"}").unwrap();
    let mut g = FluxGrid::default();
    assert_eq!(unsafe { flux_sample_grid(json.as_ptr(), 0, &mut g) }, FluxStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let empty = SamplerConfig {
        pool_min: 9000,
        pool_max: 10000,
        ..SamplerConfig::default()
    };
    let bad = CString::new(serde_json::to_string(&empty).unwrap()).unwrap();
    assert_eq!(unsafe { flux_sample_grid(bad.as_ptr(), 0, &mut g) }, FluxStatus::InvalidConfig);
}

#[test]
fn scores_and_selection_match_the_library() {
    let (t, side, dim) = (8, 4, 5);
    let n = t * side * side;
    let data: Vec<f64> = (0..n * dim).map(|i| ((i * 7919) % 101) as f64 / 13.0).collect();
    let mut scores = vec![0.0; n];
    assert_eq!(
        unsafe { flux_dynamic_scores(data.as_ptr(), t, side, dim, 2, scores.as_mut_ptr()) },
        FluxStatus::Ok
    );
    let grid = SamplingGrid::new(t, side, [1, 1, 1]);
    let want = dynamic_scores(&Tensor::new(vec![n, dim], data).unwrap(), &grid, NormOrder::L2).unwrap();
    assert_eq!(scores, want.scores);

    let mut idx = vec![0usize; 24];
    assert_eq!(
        unsafe { flux_select_group_dynamic(scores.as_ptr(), t, side, 24, 4, idx.as_mut_ptr()) },
        FluxStatus::Ok
    );
    assert_eq!(idx, select_group_dynamic(&scores, &grid, 24, 4).unwrap().indices);
}

#[test]
fn selection_errors_carry_status_and_message() {
    let scores = [1.0; 20];
    let mut idx = vec![0usize; 20];
    // five frames of four tokens in groups of 2, 2, 1 frames: the last group
    // holds 4 tokens but its quota is 6
    let status = unsafe { flux_select_group_dynamic(scores.as_ptr(), 5, 2, 20, 3, idx.as_mut_ptr()) };
    assert_eq!(status, FluxStatus::Selection);
    assert!(last_error().contains("group"), "{}", last_error());
    assert_eq!(
        unsafe { flux_select_group_dynamic(ptr::null(), 5, 2, 20, 3, idx.as_mut_ptr()) },
        FluxStatus::NullPointer
    );
}

#[test]
fn model_round_trip_and_forward() {
    let cfg = FluxViTConfig::tiny();
    let json = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { flux_model_new(json.as_ptr(), 5, &mut model) }, FluxStatus::Ok);
    let classes = unsafe { flux_model_num_classes(model) };
    assert_eq!(classes, cfg.num_classes);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { flux_model_config_json(model, &mut out) }, FluxStatus::Ok);
    let back: FluxViTConfig = serde_json::from_str(&take_string(out)).unwrap();
    assert_eq!(back, cfg);

    let video = gen_video(3, &GenSpec::default()).unwrap();
    let [t, h, w, c] = video.dims;
    let forward_ffi = |m: *const FluxModel| {
        let mut logits = vec![0.0; classes];
        let status = unsafe {
            flux_model_forward(m, video.frames.as_ptr(), t, h, w, c, 8, 21, 32, 4, logits.as_mut_ptr())
        };
        assert_eq!(status, FluxStatus::Ok, "{}", last_error());
        logits
    };
    let a = forward_ffi(model);

    // direct library computation
    let params = init_params(&cfg, 5).unwrap();
    let grid = SamplingGrid::new(8, 21, cfg.patch);
    let pool = patchify(&video, &grid).unwrap();
    let s = dynamic_scores(&pool.features, &grid, NormOrder::L2).unwrap();
    let mask = select_group_dynamic(&s.scores, &grid, 32, 4).unwrap();
    let mut g = Graph::new();
    let b = bind(&mut g, &params, false);
    let o = forward(&mut g, &b, &cfg, &pool, &mask).unwrap();
    assert_eq!(a, g.value(o.logits).data());

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { flux_model_save(model, path.as_ptr()) }, FluxStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { flux_model_load(path.as_ptr(), &mut loaded) }, FluxStatus::Ok);
    assert_eq!(forward_ffi(loaded), a);
    unsafe {
        flux_model_free(model);
        flux_model_free(loaded);
        flux_model_free(ptr::null_mut());
    }
}

#[test]
fn model_errors() {
    let mut model = ptr::null_mut();
    let bad = CString::new("{\"d_model\": 20}").unwrap();
    let mut cfg = serde_json::to_value(FluxViTConfig::tiny()).unwrap();
    cfg["d_model"] = 20.into();
    let invalid = CString::new(cfg.to_string()).unwrap();
    assert_eq!(unsafe { flux_model_new(bad.as_ptr(), 0, &mut model) }, FluxStatus::InvalidArgument);
    assert_eq!(unsafe { flux_model_new(invalid.as_ptr(), 0, &mut model) }, FluxStatus::InvalidConfig);
    let missing = CString::new("/nonexistent/model.bin").unwrap();
    let status = unsafe { flux_model_load(missing.as_ptr(), &mut model) };
    assert!(matches!(status, FluxStatus::Io | FluxStatus::Checkpoint), "{status:?}");
    assert!(model.is_null());

    assert_eq!(unsafe { flux_model_new(ptr::null(), 0, &mut model) }, FluxStatus::Ok);
    let frames = vec![0.0f32; 4 * 28 * 28];
    let mut logits = vec![0.0; 4];
    // one channel where the desk model expects three
    let status = unsafe { flux_model_forward(model, frames.as_ptr(), 4, 28, 28, 1, 4, 28, 4, 2, logits.as_mut_ptr()) };
    assert_eq!(status, FluxStatus::InvalidArgument);
    assert!(last_error().contains("channels"));
    unsafe { flux_model_free(model) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/flux.h")).unwrap();
    for name in [
        "FLUX_STATUS_OK",
        "FLUX_STATUS_PANIC",
        "typedef struct FluxModel FluxModel",
        "flux_last_error",
        "flux_string_free",
        "flux_flops_json",
        "flux_sampler_candidates_json",
        "flux_sample_grid",
        "flux_dynamic_scores",
        "flux_select_group_dynamic",
        "flux_model_new",
        "flux_model_load",
        "flux_model_save",
        "flux_model_free",
        "flux_model_forward",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

fn static_lib() -> Option<PathBuf> {
    // built beside the test binary in target/<profile>/deps
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.join("libflux_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_the_header() {
    let Some(lib) = static_lib() else {
        panic!("static library not found next to the test binary");
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "flux.h"
int main(void) {
    char *json = NULL;
    if (flux_flops_json(384, 12, 2048, &json) != FLUX_STATUS_OK) return 1;
    double scores[8] = {0, 3, 0, 4, 1, 7, 2, 5};
    size_t idx[2];
    if (flux_select_group_dynamic(scores, 8, 1, 2, 1, idx) != FLUX_STATUS_OK) return 2;
    FluxModel *m = NULL;
    if (flux_model_new(NULL, 1, &m) != FLUX_STATUS_OK) return 3;
    size_t classes = flux_model_num_classes(m);
    flux_model_free(m);
    if (flux_flops_json(10, 1, 1, &json) != FLUX_STATUS_INVALID_ARGUMENT) return 4;
    printf("%zu %zu %zu %s\n", idx[0], idx[1], classes, flux_last_error()[0] ? "err" : "none");
    flux_string_free(json);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "5 7 4 err");
}
