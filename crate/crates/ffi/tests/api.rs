use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use kvtier_ffi::*;

fn last_error() -> String {
    let p = kvt_last_error();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { kvt_string_free(p) };
    s
}

#[test]
fn throughput_matches_the_core_model() {
    let mut x = 0.0;
    let s = unsafe { kvt_throughput_dma(10e-6, 8, KvtLink::Pcie5, 1 << 20, &mut x) };
    assert_eq!(s, KvtStatus::Ok);
    let backend = kvtier::IoBackendSpec::DmaCopy {
        per_op_latency_s: 10e-6,
        max_concurrency: 8,
    };
    let expect = kvtier::io::sustained_throughput(&backend, &kvtier::LinkSpec::pcie5(), 1 << 20).unwrap();
    assert_eq!(x, expect);

    let mut a = 0.0;
    let mut b = 0.0;
    unsafe {
        assert_eq!(kvt_throughput_gpu_assist(2, 25e9, KvtLink::Pcie5, 4096, &mut a), KvtStatus::Ok);
        assert_eq!(kvt_throughput_gpu_assist(2, 25e9, KvtLink::Pcie5, 1 << 21, &mut b), KvtStatus::Ok);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_set_status_and_message() {
    let mut x = 0.0;
    let s = unsafe { kvt_throughput_gpu_assist(2, 25e9, KvtLink::Pcie5, 64, &mut x) };
    assert_eq!(s, KvtStatus::Config);
    assert!(last_error().contains("granularity"));

    let s = unsafe { kvt_throughput_dma(10e-6, 8, KvtLink::Nvme, 4096, ptr::null_mut()) };
    assert_eq!(s, KvtStatus::NullPointer);
    assert!(last_error().contains("out"));

    let mut cfg = ptr::null_mut();
    let bad = CString::new("config_version = 7").unwrap();
    assert_eq!(unsafe { kvt_config_parse(bad.as_ptr(), &mut cfg) }, KvtStatus::Config);
    assert!(cfg.is_null());

    let hw = CString::new("h200-pcie5").unwrap();
    let backend = CString::new("warp_drive").unwrap();
    let wl = CString::new("loogle").unwrap();
    let s = unsafe { kvt_config_from_profiles(hw.as_ptr(), backend.as_ptr(), wl.as_ptr(), &mut cfg) };
    assert_eq!(s, KvtStatus::Config);
    assert!(last_error().contains("warp_drive"));
}

#[test]
fn tree_reports_fastest_tier_per_token() {
    let mut tree = ptr::null_mut();
    unsafe {
        assert_eq!(kvt_tree_new(2, &mut tree), KvtStatus::Ok);
        let seq: Vec<u32> = (0..10).collect();
        assert_eq!(kvt_tree_insert(tree, seq.as_ptr(), 10, KvtTier::Disk), KvtStatus::Ok);
        assert_eq!(kvt_tree_insert(tree, seq.as_ptr(), 6, KvtTier::Host), KvtStatus::Ok);
        assert_eq!(kvt_tree_insert(tree, seq.as_ptr(), 2, KvtTier::Device), KvtStatus::Ok);
        let mut m = KvtMatch::default();
        assert_eq!(kvt_tree_match(tree, seq.as_ptr(), 9, &mut m), KvtStatus::Ok);
        assert_eq!(
            m,
            KvtMatch {
                matched: 8,
                device: 2,
                host: 4,
                disk: 2
            }
        );
        assert_eq!(kvt_tree_match(tree, ptr::null(), 0, &mut m), KvtStatus::Ok);
        assert_eq!(m.matched, 0);
        assert_eq!(kvt_tree_insert(tree, ptr::null(), 3, KvtTier::Host), KvtStatus::NullPointer);
        kvt_tree_free(tree);
    }
    assert_eq!(unsafe { kvt_tree_new(0, &mut tree) }, KvtStatus::Config);
}

#[test]
fn simulation_round_trips_through_handles() {
    let toml = CString::new("config_version = 1\n[workload]\nprofile = \"loogle\"\nnum_contexts = 2\nrate = 4.0\n").unwrap();
    let trace = CString::new(concat!(
        r#"{"id":0,"arrival_s":0.0,"context_id":1,"context_len":4000,"query_len":16,"output_len":8,"round":0,"depends_on":null}"#,
        "\n",
        r#"{"id":1,"arrival_s":2.0,"context_id":1,"context_len":4000,"query_len":16,"output_len":8,"round":0,"depends_on":null}"#,
        "\n"
    ))
    .unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(kvt_config_parse(toml.as_ptr(), &mut cfg), KvtStatus::Ok);
        assert_eq!(kvt_config_set_seed(cfg, 11), KvtStatus::Ok);

        let mut generated = ptr::null_mut();
        assert_eq!(kvt_simulate(cfg, ptr::null(), &mut generated), KvtStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(kvt_simulate(cfg, ptr::null(), &mut again), KvtStatus::Ok);
        let (a, b) = (kvt_report_json(generated), kvt_report_json(again));
        assert_eq!(CStr::from_ptr(a), CStr::from_ptr(b));
        kvt_string_free(a);
        kvt_string_free(b);

        let mut fixed = ptr::null_mut();
        assert_eq!(kvt_simulate(cfg, trace.as_ptr(), &mut fixed), KvtStatus::Ok);
        let mut s = KvtSummary::default();
        assert_eq!(kvt_report_summary(fixed, &mut s), KvtStatus::Ok);
        assert_eq!(s.requests, 2);
        assert_eq!(s.compute_tokens, 4000 + 2 * 16);
        assert!((s.hit_rate - 0.5).abs() < 0.01, "hit rate {}", s.hit_rate);

        let junk = CString::new("{not json").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(kvt_simulate(cfg, junk.as_ptr(), &mut none), KvtStatus::Trace);
        assert!(none.is_null());

        kvt_report_free(generated);
        kvt_report_free(again);
        kvt_report_free(fixed);
        kvt_config_free(cfg);
    }
}

fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_builds_against_the_header() {
    let lib = artifact_dir().join("libkvtier_ffi.a");
    if !lib.is_file() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
