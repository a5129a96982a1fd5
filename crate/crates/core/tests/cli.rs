use std::fs;
use std::process::Command;

use cachebound::harness::{load_results, load_spec};

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cachebound::cli::run(
        std::iter::once("cachebound").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn fixture_pipeline_attributes_tuned_gemm_to_l1() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("fixtures.json");
    let spec = dir.path().join("a53.json");
    let csv = dir.path().join("roofline.csv");
    let p = |p: &std::path::Path| p.to_str().unwrap().to_string();
    let (code, _, err) = run(&["fixtures", "--machine", "a53", "-o", &p(&results), "--spec-output", &p(&spec)]);
    assert_eq!(code, 0, "{err}");
    let (code, report, err) = run(&["analyze", "--spec", &p(&spec), "--results", &p(&results), "-o", &p(&csv)]);
    assert_eq!(code, 0, "{err}");
    assert!(report.contains("operational threshold"));

    let text = fs::read_to_string(&csv).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut checked = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if &rec[col("precision")] != "f32" {
            continue;
        }
        let n: u64 = rec[col("label")].trim_start_matches('N').parse().unwrap();
        if n >= 128 {
            assert_eq!(&rec[col("limiting")], "L1", "N{n}");
            assert_eq!(&rec[col("verdict")], "consistent-with-bound");
            checked += 1;
        }
    }
    assert_eq!(checked, 4);

    // Same inputs, same bytes.
    let again = dir.path().join("again.csv");
    assert_eq!(run(&["analyze", "--spec", &p(&spec), "--results", &p(&results), "-o", &p(&again)]).0, 0);
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn bench_single_gemm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let (code, stdout, err) = run(&[
        "bench", "--suite", "gemm:1", "--precision", "f32", "--reps", "3", "--workers", "1", "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("N1 f32"));
    let set = load_results(&out).unwrap();
    assert_eq!(set.measurements.len(), 1);
    assert!(set.measurements[0].stats.reps >= 3);
}

#[test]
fn bench_is_deterministic_with_fake_clock() {
    let dir = tempfile::tempdir().unwrap();
    let run_once = |name: &str| {
        let out = dir.path().join(name);
        let (code, _, err) = run(&[
            "bench", "--suite", "gemm:8,16", "--precision", "f32,i8,bs2x2b", "--reps", "3", "--warmup", "1",
            "--min-time", "0", "--workers", "2", "--step-clock-ns", "1000", "--spec",
            "data/a53.json", "-o", out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        load_results(&out).unwrap()
    };
    let (a, b) = (run_once("a.json"), run_once("b.json"));
    assert_eq!(a.measurements, b.measurements);
    assert_eq!(a.machine, b.machine);
    assert_eq!(a.measurements.len(), 6);
    assert!(a.measurements.iter().all(|m| m.samples.iter().all(|&s| s == 1e-6)));
}

#[test]
fn probe_with_template_and_fake_clock() {
    let dir = tempfile::tempdir().unwrap();
    let mut template = cachebound::fixtures::a53_spec();
    for (level, block) in template.memory_levels.iter_mut().zip([4096, 8192, 65536]) {
        level.probe_block = block;
    }
    let tp = dir.path().join("template.json");
    cachebound::harness::save_spec(&template, &tp).unwrap();
    let probe = |name: &str| {
        let out = dir.path().join(name);
        let (code, _, err) = run(&[
            "probe", "--template", tp.to_str().unwrap(), "--reps", "3", "--workers", "2", "--pass-bytes",
            "1048576", "--peak-macs", "1600000", "--step-clock-ns", "10000000", "-o", out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        (fs::read(&out).unwrap(), load_spec(&out).unwrap())
    };
    let (bytes_a, a) = probe("a.json");
    let (bytes_b, _) = probe("b.json");
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a.measured_peak, Some(2.0 * 1_600_000.0 / 0.01));
}

#[test]
fn model_with_spec_prints_bounds() {
    let (code, out, err) = run(&["model", "--suite", "gemm:1024", "--spec", "data/a53.json", "--precision", "f32,bs1x1u"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("N1024 gemm macs=1073741824"));
    assert!(out.contains("L1=0.285177"), "{out}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_cachebound");
    let status = |args: &[&str], workers: Option<&str>| {
        let mut cmd = Command::new(bin);
        cmd.args(args);
        match workers {
            Some(w) => cmd.env("CACHEBOUND_WORKERS", w),
            None => cmd.env_remove("CACHEBOUND_WORKERS"),
        };
        cmd.output().unwrap()
    };
    assert_eq!(status(&["--help"], None).status.code(), Some(0));
    let bad = status(&["bench", "--nope"], None);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    let zero = status(&["bench", "--suite", "gemm:1", "-o", "/tmp/unused-cachebound.json"], Some("0"));
    assert_eq!(zero.status.code(), Some(1));
    let bad_prec = status(&["bench", "--suite", "gemm:1", "--precision", "bs3x9u", "-o", "/tmp/unused-cachebound.json"], None);
    assert_eq!(bad_prec.status.code(), Some(1));
    let ok = status(&["model", "--suite", "resnet18", "--convention", "paper"], Some("2"));
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("macs=")).count(), 10);
}
