use std::path::Path;
use std::process::{Command, Output};

fn qdetect(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdetect"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qdetect(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn quick_config(dir: &Path) {
    let text = ok(dir, &["preset", "paper-1qubit"]).replace("epochs = 10", "epochs = 1").replace("epochs = 30", "epochs = 1");
    std::fs::write(dir.join("quick.toml"), text).unwrap();
}

#[test]
fn stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    quick_config(d);
    ok(d, &["gen", "--ions", "1", "--count", "120", "--seed", "3", "--out", "d.qimg"]);
    ok(d, &["calibrate", "--data", "d.qimg", "--out", "t.toml"]);
    ok(d, &["classify", "--model", "t.toml", "--data", "d.qimg", "--report", "r1.toml"]);
    ok(d, &["train-mlp", "--data", "d.qimg", "--config", "quick.toml", "--out", "m.qmlp"]);
    ok(d, &["compile-lut", "--model", "m.qmlp", "--out", "m.qlut", "--netlist", "n.txt"]);
    let v = ok(d, &["verify-lut", "--model", "m.qmlp", "--lut", "m.qlut", "--data", "d.qimg"]);
    assert!(v.contains("argmax agreement 12/12"), "{v}");
    ok(d, &["infer", "--model", "m.qlut", "--data", "d.qimg", "--report", "r2.toml"]);
    ok(d, &["train-vit", "--data", "d.qimg", "--config", "quick.toml", "--out", "v.qvit"]);
    ok(d, &["quantize", "--model", "v.qvit", "--format", "16.8", "--out", "vq.qvit"]);
    ok(d, &["infer", "--model", "vq.qvit", "--data", "d.qimg", "--report", "r3.toml"]);
    let rep = ok(d, &["report", "--in", "r1.toml", "r2.toml", "r3.toml", "--out", "cmp"]);
    assert!(rep.contains("threshold") && rep.contains("MLP") && rep.contains("ViT"), "{rep}");
    assert!(d.join("cmp.txt").exists() && d.join("cmp.csv").exists());
    for f in ["d.qimg", "m.qmlp", "m.qlut", "vq.qvit", "t.toml", "r1.toml", "quick.toml"] {
        ok(d, &["info", f]);
    }
    assert!(ok(d, &["info", "vq.qvit"]).contains("fixed 16.8"));
}

#[test]
fn simulate_writes_trace_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(
        d,
        &["simulate", "--profile", "vit1", "--image", "10x10", "--trace", "f.trace", "--report", "f.txt"],
    );
    assert!(out.contains("FVAL") && out.contains("1.410000"), "{out}");
    let trace = std::fs::read_to_string(d.join("f.trace")).unwrap();
    assert!(trace.contains("DNN_valid_rise"));
    assert_eq!(trace.matches("LVAL_rise").count(), 10);
    assert!(ok(d, &["info", "f.trace"]).contains("timing trace"));
}

#[test]
fn run_reports_artifacts_and_reuses_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    quick_config(d);
    let args = ["run", "--config", "quick.toml", "--count", "100", "--out", "out"];
    let first = ok(d, &args);
    assert!(first.contains("[simulate] done"), "{first}");
    assert!(first.contains("report.txt"));
    let second = ok(d, &args);
    assert!(!second.contains("] done"), "{second}");
    assert!(second.contains("[gen] cached"));
}

#[test]
fn errors_exit_nonzero_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("junk.bin"), b"XX\xff\x00junk").unwrap();
    let out = qdetect(d, &["info", "junk.bin"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unrecognized magic"));

    let out = qdetect(d, &["calibrate", "--data", "missing.qimg", "--out", "t.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.qimg"));

    std::fs::write(d.join("bad.toml"), "name = \"x\"\nseed = 1\nsurprise = 2\n").unwrap();
    let out = qdetect(d, &["run", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));

    let out = qdetect(d, &["quantize", "--model", "x", "--format", "16-8", "--out", "y"]);
    assert!(!out.status.success());
}
