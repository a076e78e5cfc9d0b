//! End-to-end checks of the `nofis` binary: exit codes, reports and
//! heatmap output.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nofis(args: &[&str], out_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nofis"));
    cmd.args(args).env_remove("NOFIS_OUT_DIR");
    if let Some(dir) = out_env {
        cmd.env("NOFIS_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn report(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

const TINY_LEAF: &str = r#"
problem = "leaf"
method = "nofis"
checkpoint = true
[golden]
mode = "quadrature2d"
[schedule]
thresholds = [15.0, 8.0, 3.0, 0.0]
[nofis]
layers_per_step = 2
epochs = 2
batch_size = 50
n_is = 10
hidden = [8]
"#;

#[test]
fn run_writes_report_with_exact_calls_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "leaf.toml", TINY_LEAF);
    let out = dir.path().join("out");
    let o = nofis(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out, "report.json");
    assert_eq!(r["aggregate"]["trials"][0]["calls"], 4 * 2 * 50 + 10);
    assert_eq!(r["golden"]["provenance"]["kind"], "quadrature");
    assert_eq!(r["config"]["problem"], "leaf");
    assert!(out.join("model-seed0.nofis").exists());
    assert!(out.join("golden_cache.json").exists());

    let csv = out.join("heat.csv");
    let o = nofis(
        &[
            "visualize",
            "--checkpoint",
            out.join("model-seed0.nofis").to_str().unwrap(),
            "--steps",
            "60",
            "--out",
            csv.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("x,y,density\n"));
    assert_eq!(text.lines().count(), 60 * 60 + 1);
}

#[test]
fn unknown_key_in_shipped_config_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/leaf.toml")).unwrap();
    let cfg = write(dir.path(), "leaf.toml", &text.replace("epochs = 20", "epochs = 20\nbogus = 1"));
    let o = nofis(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nofis.bogus"));
}

#[test]
fn zero_temperature_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &TINY_LEAF.replace("n_is = 10", "n_is = 10\ntemperature = 0.0"));
    let out = dir.path().join("out");
    let o = nofis(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn missing_files_are_io_errors() {
    let o = nofis(&["run", "--config", "/nonexistent/run.toml"], None);
    assert_eq!(o.status.code(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let o = nofis(
        &["visualize", "--checkpoint", "/nonexistent/model.nofis", "--out", dir.path().join("h.csv").to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn seed_override_changes_only_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "mc.toml",
        "problem = \"halfspace1d\"\nmethod = \"mc\"\n[mc]\nsamples = 1000\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(nofis(&["run", "--config", &cfg, "--out", a.to_str().unwrap()], None).status.success());
    assert!(nofis(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "5"], None).status.success());
    let (ra, rb) = (report(&a, "report.json"), report(&b, "report.json"));
    assert_eq!(ra["config"]["seed"], 0);
    assert_eq!(rb["config"]["seed"], 5);
    let mut ca = ra["config"].clone();
    let mut cb = rb["config"].clone();
    for c in [&mut ca, &mut cb] {
        c.as_object_mut().unwrap().remove("seed");
        c.as_object_mut().unwrap().remove("out_dir");
    }
    assert_eq!(ca, cb);
    assert_eq!(rb["aggregate"]["trials"][0]["seed"], 5);
}

#[test]
fn output_directory_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "mc.toml",
        "problem = \"halfspace1d\"\nmethod = \"mc\"\n[mc]\nsamples = 100\n",
    );
    let env_out = dir.path().join("env");
    let o = nofis(&["run", "--config", &cfg], Some(&env_out));
    assert!(o.status.success());
    assert!(env_out.join("report.json").exists());
}

#[test]
fn identical_runs_produce_identical_trials() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sus.toml",
        "problem = \"ring\"\nmethod = \"sus\"\nrepeats = 3\n[sus]\nsamples_per_level = 500\n",
    );
    let strip = |v: &serde_json::Value| {
        let mut trials = v["aggregate"]["trials"].clone();
        for t in trials.as_array_mut().unwrap() {
            t.as_object_mut().unwrap().remove("wall_time_s");
        }
        trials
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(nofis(&["run", "--config", &cfg, "--out", a.to_str().unwrap()], None).status.success());
    assert!(nofis(&["run", "--config", &cfg, "--out", b.to_str().unwrap()], None).status.success());
    assert_eq!(strip(&report(&a, "report.json")), strip(&report(&b, "report.json")));
}

#[test]
fn compare_on_common_halfspace_matches_closed_form() {
    // P = Phi(-1.8) is not rare, so both methods land within MC error bars
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cmp.toml",
        r#"
problem = "halfspace1d"
methods = ["nofis", "mc"]
repeats = 3
[golden]
mode = "analytic"
[schedule]
thresholds = [0.0]
[nofis]
steps = 1
layers_per_step = 2
epochs = 5
batch_size = 100
n_is = 20000
hidden = [8]
[mc]
samples = 20000
"#,
    );
    let out = dir.path().join("out");
    let o = nofis(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("mc,") && rows[1].starts_with("nofis,"));
    let truth: f64 = 0.035_930_319;
    let r = report(&out, "compare.json");
    for rep in r["reports"].as_array().unwrap() {
        let n = 20000.0;
        for t in rep["trials"].as_array().unwrap() {
            let p = t["p_est"].as_f64().unwrap();
            let se = (truth * (1.0 - truth) / n).sqrt();
            // the trained proposal has lower variance than MC, so the MC
            // standard error is a conservative bound for both
            assert!((p - truth).abs() < 3.0 * se, "{} {p}", rep["method"]);
        }
    }
}

#[test]
fn compare_records_failing_methods_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "cmp.toml",
        r#"
problem = "cube"
methods = ["sus", "mc"]
[golden]
mode = "analytic"
[mc]
samples = 100
[sus]
samples_per_level = 100
max_levels = 2
"#,
    );
    let out = dir.path().join("out");
    let o = nofis(&["compare", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    let r = report(&out, "compare.json");
    assert_eq!(r["reports"].as_array().unwrap().len(), 1);
    assert_eq!(r["failed_methods"][0]["method"], "sus");
}

#[test]
fn visualize_optimal_proposal_of_ring() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ring.csv");
    let o = nofis(&["visualize", "--optimal", "ring", "--steps", "100", "--out", csv.to_str().unwrap()], None);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("10000 cells"));
    let o = nofis(&["visualize", "--optimal", "cube", "--out", csv.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
}
