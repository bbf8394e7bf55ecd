use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use spikeconv::model::WeightSet;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spikeconv"));
    c.env_remove("LAS_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy block converted once and shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let (cfg, w, x, block) = (root.join("cfg.json"), root.join("w.lasw"), root.join("x.csv"), root.join("block"));
        let o = run(&["init", "--config", s(&cfg), "--weights", s(&w), "--input", s(&x)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = run(&["convert", "--config", s(&cfg), "--weights", s(&w), "--out", s(&block)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Fixture { _dir: dir, root }
    })
}

#[test]
fn calibrate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gelu.json");
    let o = run(&["calibrate", "--target", "gelu", "--range", "-5,5", "--levels", "8", "--steps", "16", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["target"], "gelu");
    assert_eq!(r["boundaries"].as_array().unwrap().len(), 9);
}

#[test]
fn calibrate_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let o = run(&["calibrate", "--target", "tanhh", "--range", "-1,1", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gelu, silu, exp, reciprocal, square, invsqrt"), "{}", stderr(&o));
    let o = run(&["calibrate", "--target", "gelu", "--range", "-1,1", "--samples", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
    let o = run(&["calibrate", "--target", "gelu", "--range", "1,-1", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn run_meets_accuracy_and_is_reproducible() {
    let f = fixture();
    let (a, b) = (f.path("run_a.json"), f.path("run_b.json"));
    for p in [&a, &b] {
        let o = run(&["run", "--block", s(&f.path("block")), "--input", s(&f.path("x.csv")), "--steps", "16", "--report", s(p)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let r: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(r["output_rel_err"].as_f64().unwrap() <= 1e-2);
    assert_eq!(r["sequences"], 4);
    assert_eq!(r["layers"].as_array().unwrap().len(), 1);
    assert!(r["calibration"].as_array().unwrap().len() == 7);

    let o = run(&["energy", "--report", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let ratio = r["energy"]["ratio"].as_f64().unwrap();
    assert!(text.contains(&format!("{ratio:.6}")), "{text}");
}

#[test]
fn sweep_error_is_non_increasing() {
    let f = fixture();
    let o = run(&["sweep", "--block", s(&f.path("block")), "--steps-list", "4,8,10,13,16"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("timestep,mean_rel_err,sops,ratio"));
    let errs: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(errs.len(), 5);
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
}

#[test]
fn compare_prints_table() {
    let f = fixture();
    let o = run(&["compare", "--block", s(&f.path("block")), "--steps", "8", "--encoder", "single-mt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("layer"));
    assert!(text.contains("output") && text.contains("SingleMt"));
}

#[test]
fn energy_rejects_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.json");
    std::fs::write(&p, "").unwrap();
    let o = run(&["energy", "--report", s(&p)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("empty.json"));
}

#[test]
fn missing_files_exit_with_path() {
    let o = run(&["run", "--block", "no/such/dir"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no/such/dir"));
}

#[test]
fn numeric_failure_exits_3() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let block = dir.path().join("block");
    std::fs::create_dir(&block).unwrap();
    std::fs::copy(f.path("block/block.json"), block.join("block.json")).unwrap();
    let mut w = WeightSet::load(&f.path("block/block.lasw")).unwrap();
    let mut wq = w.layer(0, "attn.wq").unwrap().clone();
    for i in 0..wq.rows() {
        wq.set(i, 0, f64::MAX);
    }
    w.insert("l0.attn.wq", wq);
    w.save(&block.join("block.lasw")).unwrap();
    let o = run(&["run", "--block", s(&block), "--steps", "4"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("layer 0") && stderr(&o).contains("timestep"));
}

#[test]
fn las_seed_overrides_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let w = dir.path().join("w.lasw");
    let o = bin().env("LAS_SEED", "100").args(["init", "--config", s(&cfg), "--weights", s(&w)]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(c["seeds"]["weights"], 100);
    assert_eq!(c["seeds"]["input"], 103);
    let o = bin().env("LAS_SEED", "abc").args(["init", "--config", s(&cfg), "--weights", s(&w)]).output().unwrap();
    assert_eq!(code(&o), 2);
}
