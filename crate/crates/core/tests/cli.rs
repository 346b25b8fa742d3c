use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "data.n=64",
    "data.eval_n=32",
    "data.size=8",
    "data.cycles=2",
    "teacher.channels=4,8",
    "teacher.epochs=1",
    "teacher.batch=16",
    "student.channels=2,4",
    "search.steps=3",
    "search.batch=8",
    "retrain.steps=6",
    "retrain.batch=16",
];

fn distpro(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_distpro"));
    c.arg(cmd).arg("--out").arg(out).args(["--seed", "3"]);
    for s in SMALL.iter().chain(extra) {
        c.args(["--set", s]);
    }
    c.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn search_then_retrain_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    ok(&distpro("search", dir.path(), &[]));
    assert!(dir.path().join("search/search.log").exists());
    ok(&distpro("retrain", dir.path(), &[]));
    let report = fs::read_to_string(dir.path().join("retrain/report.txt")).unwrap();
    let acc: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("accuracy="))
        .expect("accuracy line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    ok(&distpro("eval", dir.path(), &[]));
    ok(&distpro("export-schedule", dir.path(), &[]));
}

#[test]
fn a_schedule_for_other_pathways_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(&distpro("search", dir.path(), &[]));
    // the stored schedule has 12 pathways; asking for one kind expects 4
    let o = distpro("retrain", dir.path(), &["pathways.kinds=identity-resize"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error[config]"), "{err}");
}

#[test]
fn unknown_keys_and_bad_values_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = distpro("gen-data", dir.path(), &["search.gama=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("search.gama"));
    let o = distpro("gen-data", dir.path(), &["search.split=1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    for cmd in ["gen-data", "pretrain", "search", "retrain", "eval", "export-schedule"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let oa = distpro(cmd, a.path(), &[]);
        let ob = distpro(cmd, b.path(), &[]);
        ok(&oa);
        ok(&ob);
        assert_eq!(oa.stdout.len(), ob.stdout.len(), "{cmd}");
        let (fa, fb) = (files(a.path()), files(b.path()));
        assert!(!fa.is_empty());
        assert_eq!(fa.len(), fb.len(), "{cmd}");
        for ((pa, da), (pb, db)) in fa.iter().zip(&fb) {
            assert_eq!(pa, pb);
            assert!(da == db, "{cmd}: {} differs", pa.display());
        }
    }
}
