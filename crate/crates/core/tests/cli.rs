use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use spsa_lab::artifacts::{self, ControllerFile, MetricsFile};
use spsa_lab::cli::{self, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK};
use spsa_lab::energy::{write_loss_records, LossRecord};
use spsa_lab::params::DriveLossFit;
use spsa_lab::pipeline::DesignReport;
use spsa_lab::sim::ControllerSpec;

fn run(args: &[&str]) -> u8 {
    let mut full = vec!["spsa-lab"];
    full.extend_from_slice(args);
    cli::run(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One default design shared by the tests.
fn design_dir() -> &'static Path {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let t = tempfile::tempdir().unwrap();
        let out = t.path().join("design");
        assert_eq!(run(&["design", "--out", s(&out)]), EXIT_OK);
        (t, out)
    })
    .1
}

#[derive(serde::Deserialize)]
struct ReportFile {
    report: DesignReport,
}

#[test]
fn design_reports_static_gain() {
    let f = ControllerFile::read(&design_dir().join("static.json")).unwrap();
    match f.controller {
        ControllerSpec::Static { c_d } => assert!((c_d / 0.06722 - 1.0).abs() < 0.02, "c_d = {c_d}"),
        other => panic!("unexpected controller {}", other.name()),
    }
    assert_eq!(f.provenance.manifest, "manifest-design.json");
    assert!(design_dir().join("manifest-design.json").exists());
    let pgc = ControllerFile::read(&design_dir().join("pgc.json")).unwrap();
    assert!(pgc.generator.is_some());
}

#[test]
fn design_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("again");
    assert_eq!(run(&["design", "--out", s(&out)]), EXIT_OK);
    for f in ["static.json", "spsa.json", "pgc.json", "design_report.json"] {
        let a = artifacts::digest_file(&design_dir().join(f)).unwrap();
        let b = artifacts::digest_file(&out.join(f)).unwrap();
        assert_eq!(a.sha256, b.sha256, "{f}");
    }
}

#[test]
fn frictionless_design_needs_one_iteration() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.toml");
    std::fs::write(&cfg, "[transducer]\nf_c = 0.0\n").unwrap();
    let out = t.path().join("out");
    assert_eq!(run(&["design", "--config", s(&cfg), "--out", s(&out)]), EXIT_OK);
    let r: ReportFile = artifacts::read_json(&out.join("design_report.json")).unwrap();
    assert_eq!(r.report.static_iterations, 1);
    assert_eq!(r.report.spsa_iterations, 1);
}

#[test]
fn verify_exit_codes() {
    let d = design_dir();
    assert_eq!(run(&["verify", s(&d.join("spsa.json")), "--out", s(d)]), EXIT_OK);
    assert_eq!(run(&["verify", s(&d.join("pgc.json")), "--format", "csv"]), EXIT_OK);
    assert_eq!(run(&["verify", s(&d.join("static.json"))]), EXIT_OK);

    let t = tempfile::tempdir().unwrap();
    let mut f = ControllerFile::read(&d.join("static.json")).unwrap();
    f.controller = ControllerSpec::Static { c_d: 0.1 };
    let bad = t.path().join("bad.json");
    artifacts::write_json(&bad, &f).unwrap();
    assert_eq!(run(&["verify", s(&bad)]), EXIT_INFEASIBLE);
    // the same gain passes with a small enough port resistance
    assert_eq!(run(&["verify", s(&bad), "--r", "9.0"]), EXIT_OK);

    assert_eq!(run(&["verify", s(&t.path().join("missing.json"))]), EXIT_INPUT);
    let junk = t.path().join("junk.json");
    std::fs::write(&junk, "{ not json").unwrap();
    assert_eq!(run(&["verify", s(&junk)]), EXIT_INPUT);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["frobnicate"]), EXIT_INPUT);
    assert_eq!(run(&["simulate", "--seeds", "many"]), EXIT_INPUT);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn smoke_simulation_is_flagged_below_warmup() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("sim");
    let ctrl = design_dir().join("static.json");
    assert_eq!(
        run(&["simulate", "--controller", s(&ctrl), "--duration", "0.1", "--out", s(&out)]),
        EXIT_OK
    );
    let m: MetricsFile = artifacts::read_json(&out.join("static_metrics.json")).unwrap();
    assert!(m.below_warmup);
    assert!(out.join("static_seed1.json").exists());
}

#[test]
fn seed_sweep_writes_pooled_metrics_and_report() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("sweep");
    let d = design_dir();
    let (st_ctrl, sp_ctrl) = (d.join("static.json"), d.join("spsa.json"));
    let args = [
        "simulate",
        "--controller",
        s(&st_ctrl),
        "--controller",
        s(&sp_ctrl),
        "--duration",
        "30",
        "--seeds",
        "3",
        "--seed",
        "11",
        "--format",
        "csv",
        "--out",
        s(&out),
    ];
    assert_eq!(run(&args), EXIT_OK);
    let m: MetricsFile = artifacts::read_json(&out.join("spsa_metrics.json")).unwrap();
    assert_eq!(m.per_seed.iter().map(|p| p.seed).collect::<Vec<_>>(), [11, 12, 13]);
    let mean = m.per_seed.iter().map(|p| p.metrics.j).sum::<f64>() / 3.0;
    assert!((m.pooled.j - mean).abs() < 1e-15);
    assert!(out.join("static_seed12.csv").exists());

    let rep = t.path().join("rep");
    let st = out.join("static_metrics.json");
    let sp = out.join("spsa_metrics.json");
    assert_eq!(run(&["report", s(&st), s(&sp), "--out", s(&rep)]), EXIT_OK);
    let csv = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "quantity,static,spsa,spsa_improvement_pct");
    assert_eq!(run(&["report", s(&sp), "--out", s(&rep)]), EXIT_INPUT);
}

#[test]
fn simulate_without_controllers_is_an_input_error() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(&["simulate", "--out", s(t.path()), "--duration", "1"]), EXIT_INPUT);
}

#[test]
fn fit_loss_recovers_reference_coefficients() {
    let t = tempfile::tempdir().unwrap();
    let truth = DriveLossFit::reference();
    let mut recs = Vec::new();
    for i in 0..40 {
        let x = i as f64;
        let (v_out, u, u_s) = (20.0 + x, (x * 0.37).sin(), 2.0 * (x * 0.91).cos());
        recs.push(LossRecord {
            v_out,
            u,
            u_s,
            p_loss: truth.predict(v_out, u, u_s),
        });
    }
    let path = t.path().join("rec.csv");
    write_loss_records(&path, &recs).unwrap();
    let out = t.path().join("fit");
    assert_eq!(run(&["fit-loss", s(&path), "--out", s(&out)]), EXIT_OK);
    let v: serde_json::Value = artifacts::read_json(&out.join("loss_fit.json")).unwrap();
    let r_t = v["fit"]["params"]["r_t"].as_f64().unwrap();
    assert!((r_t / truth.r_t - 1.0).abs() < 1e-9);
    assert_eq!(run(&["fit-loss", s(&t.path().join("none.csv"))]), EXIT_INPUT);
}
