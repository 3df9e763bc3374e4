//! Drives the `las` binary through the full pipeline on a tiny corpus.

use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 6] = [
    "n_train=40",
    "n_valid=10",
    "n_test=10",
    "max_epochs=2",
    "enc_hidden=8",
    "dec_hidden=8",
];

fn las(root: &Path, args: &[&str], settings: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_las"));
    cmd.env("LAS_OUTPUT_ROOT", root).args(args);
    for s in settings {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let data_s = data.to_str().unwrap();

    ok(&las(root, &["gen-data", "--out", "data"], &TINY));
    assert!(data.join("train/manifest.tsv").is_file());
    assert!(read(&data.join("stamp.txt")).contains("config_hash = "));

    ok(&las(root, &["train", "--data", data_s, "--out", "run"], &TINY));
    let metrics = read(&root.join("run/metrics.tsv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch\ttrain_loss_per_char\tvalid_loss_per_char\tlr\twall_seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 5));
    let stamp = read(&root.join("run/stamp.txt"));
    assert!(stamp.contains("seed = 1") && stamp.contains("command = train"));
    let model = root.join("run/model.lasc");
    let model_s = model.to_str().unwrap();

    ok(&las(root, &["build-lm", "--data", data_s, "--out", "lm.arpa"], &TINY));
    let lm = root.join("lm.arpa");
    assert!(read(&lm).trim_start().starts_with("\\data\\"));
    assert!(root.join("lm.arpa.stamp").is_file());

    let decode_args = ["decode", "--model", model_s, "--data", data_s, "--lm", lm.to_str().unwrap()];
    let mut args = decode_args.to_vec();
    args.extend(["--out", "decode.tsv"]);
    ok(&las(root, &args, &["beam=3"]));
    let hyp = root.join("decode.tsv");
    let rows = read(&hyp);
    assert_eq!(rows.lines().count(), 10);
    for row in rows.lines() {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(f.len(), 4, "{row}");
        let lp: f64 = f[2].parse().unwrap();
        let cost: f64 = f[3].parse().unwrap();
        assert!(lp <= 0.0 && cost.is_finite(), "{row}");
    }

    let reference = data.join("test/text.tsv");
    let report = ok(&las(
        root,
        &["eval", "--ref", reference.to_str().unwrap(), "--hyp", hyp.to_str().unwrap(), "--out", "eval.tsv"],
        &[],
    ));
    assert!(report.contains("CER") && report.contains("utterances\t10"));
    let same = ok(&las(
        root,
        &["eval", "--ref", reference.to_str().unwrap(), "--hyp", reference.to_str().unwrap(), "--out", "self.tsv"],
        &[],
    ));
    assert!(same.contains("CER\t0.0000") && same.contains("SER\t0.0000"), "{same}");

    let table = ok(&las(
        root,
        &[
            "sweep", "--param", "beam", "--values", "1,2,3,4,5", "--model", model_s, "--data", data_s, "--out",
            "sweep.tsv",
        ],
        &["temperature=1"],
    ));
    let written = read(&root.join("sweep.tsv"));
    assert_eq!(table, written);
    let rows: Vec<&str> = written.lines().collect();
    assert_eq!(rows[0], "beam\tCER\tSER");
    assert_eq!(rows.len(), 6);
    for (row, beam) in rows[1..].iter().zip(1..) {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(f[0], beam.to_string());
        let cer: f64 = f[1].parse().unwrap();
        let ser: f64 = f[2].parse().unwrap();
        assert!(cer >= 0.0 && (0.0..=1.0).contains(&ser));
    }
    assert!(root.join("sweep.tsv.stamp").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(las(root, &["gen-data"], &["no_such_key=1"]).status.code(), Some(1));
    assert_eq!(las(root, &["frobnicate"], &[]).status.code(), Some(1));
    let missing = root.join("nowhere");
    let out = las(root, &["train", "--data", missing.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn same_settings_give_same_stamp() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let settings = ["n_train=4", "n_valid=2", "n_test=2"];
    ok(&las(root, &["gen-data", "--out", "a"], &settings));
    ok(&las(root, &["gen-data", "--out", "b"], &settings));
    assert_eq!(read(&root.join("a/stamp.txt")), read(&root.join("b/stamp.txt")));
    assert_eq!(
        read(&root.join("a/train/text.tsv")),
        read(&root.join("b/train/text.tsv"))
    );
    ok(&las(root, &["gen-data", "--out", "c"], &["n_train=4", "n_valid=2", "n_test=2", "data_seed=8"]));
    assert_ne!(read(&root.join("a/stamp.txt")), read(&root.join("c/stamp.txt")));
}
