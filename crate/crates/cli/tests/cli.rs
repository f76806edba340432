use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use c3dg_core::evalcli::RunReport;

fn c3dg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3dg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn c3dg")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "epochs = 2\nsamples_per_cell = 20\ncheck_batches = 3\nentropy_draws = 50\nbound_samples = 2\n";

fn small_config(dir: &Path) {
    fs::write(dir.join("run.cfg"), SMALL).unwrap();
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    for out in ["a", "b"] {
        let o = c3dg(dir.path(), &["synth", "--config", "run.cfg", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["scene.hsic", "scene.hsil", "oracle.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = c3dg(
        dir.path(),
        &["train", "--config", "run.cfg", "--model", "m.c3dg", "--report", "train.json", "--map", "train.ppm"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = c3dg(
        dir.path(),
        &["eval", "--config", "run.cfg", "--model", "m.c3dg", "--report", "eval.json", "--map", "eval.ppm"],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let train = RunReport::read(dir.path().join("train.json")).unwrap();
    let eval = RunReport::read(dir.path().join("eval.json")).unwrap();
    assert_eq!(train.metrics, eval.metrics);
    assert_eq!(train.confusion, eval.confusion);
    assert_eq!(train.history.len(), 2);
    assert!(eval.history.is_empty());
    assert_eq!(
        fs::read(dir.path().join("train.ppm")).unwrap(),
        fs::read(dir.path().join("eval.ppm")).unwrap()
    );
}

#[test]
fn missing_model_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = c3dg(dir.path(), &["eval", "--model", "does-not-exist.c3dg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does-not-exist.c3dg"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["train"],
        vec!["eval", "--model"],
        vec!["check", "theorem1"],
        vec!["check", "nonsense", "--model", "m.c3dg"],
    ] {
        let o = c3dg(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn bad_config_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "epochs = 2\nlamda1 = 0.1\n").unwrap();
    let o = c3dg(
        dir.path(),
        &["train", "--config", "bad.cfg", "--model", "m.c3dg", "--report", "r.json", "--map", "m.ppm"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lamda1"), "{}", stderr(&o));
    let left: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("bad.cfg")]);
}

#[test]
fn corrupt_data_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    fs::write(dir.path().join("scene.hsic"), b"HSIC garbage").unwrap();
    fs::write(dir.path().join("scene.hsil"), b"HSIL garbage").unwrap();
    let o = c3dg(
        dir.path(),
        &["train", "--config", "run.cfg", "--data", "scene.hsic", "--model", "m.c3dg", "--report", "r.json"],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    for f in ["m.c3dg", "r.json"] {
        assert!(!dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn gradient_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = c3dg(dir.path(), &["check", "grads"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn split_writes_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert!(c3dg(dir.path(), &["synth", "--config", "run.cfg", "--out", "s"]).status.success());
    let o = c3dg(dir.path(), &["split", "--data", "s/scene.hsic", "--out", "q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for q in 1..=4 {
        assert!(dir.path().join(format!("q/domain{q}.hsic")).exists());
        assert!(dir.path().join(format!("q/domain{q}.hsil")).exists());
    }
}
