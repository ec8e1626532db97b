use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffseg::cli::RunManifest;
use diffseg::data::decode_pgm;
use diffseg::diffusion::TimestepWeights;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_diffseg"));
    c.env_remove("DIFFSEG_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn diffseg")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed ({:?}): {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` except run manifests, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if path.file_name().unwrap() != "run.json" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn gen_data_counts_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["--seed", "7", "gen-data", "--kind", "lesion", "--count", "64", "--size", "32", "--out-dir", p(dir)]);
    }
    let files = tree(&a);
    let pgms = files.keys().filter(|k| k.extension().is_some_and(|e| e == "pgm")).count();
    assert_eq!(pgms, 128);
    let manifest = String::from_utf8(files[Path::new("manifest.csv")].clone()).unwrap();
    assert_eq!(manifest.lines().next(), Some("id,split,kind"));
    assert_eq!(manifest.lines().count(), 65);
    assert_eq!(manifest.lines().filter(|l| l.contains(",val,")).count(), 13);
    assert_eq!(files, tree(&b));

    let m = RunManifest::load(&a.join("run.json")).unwrap();
    assert_eq!((m.command.as_str(), m.status.as_str(), m.seed), ("gen-data", "ok", 7));
    assert_eq!(m.outputs.len(), 129);
    assert_eq!(m.config["kind"], "lesion");
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["gen-data", "--kind", "retina"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["eval", "--checkpoint", "c", "--data", "d", "--ensemble-n", "3", "--preset"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--ensemble-n") && err.contains("--preset"), "{err}");
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .env("DIFFSEG_OUT", tmp.path())
        .args(["gen-data", "--kind", "nuclei", "--count", "4", "--size", "16"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("gen-data/manifest.csv").exists());
    let flag = tmp.path().join("flag");
    let out = bin()
        .env("DIFFSEG_OUT", tmp.path().join("ignored"))
        .args(["--out-root", p(&flag), "gen-data", "--kind", "nuclei", "--count", "4", "--size", "16"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(flag.join("gen-data/manifest.csv").exists());
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn missing_data_and_bad_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train", "--experiment", "e2", "--data", p(&tmp.path().join("nope")), "--out-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    let m = RunManifest::load(&tmp.path().join("run.json")).unwrap();
    assert_eq!(m.status, "failed");
    assert!(m.error.is_some());

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "t,value\n1,2\n").unwrap();
    let out = run(&["weights", "--profile", p(&bad), "--out-dir", p(&tmp.path().join("w"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn e1_manifest_echoes_optimizer_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--kind", "lesion", "--count", "6", "--size", "8", "--out-dir", p(&data)]);
    let out = tmp.path().join("e1");
    ok(&[
        "train", "--experiment", "e1", "--data", p(&data), "--steps", "2", "--batch-size", "2", "--base-channels", "2", "--depth", "1",
        "--time-embed-dim", "4", "--out-dir", p(&out),
    ]);
    let m = RunManifest::load(&out.join("run.json")).unwrap();
    assert_eq!(m.config["lr"], 1e-5);
    assert_eq!(m.config["optimizer"], "adam");
    assert_eq!(m.config["experiment"], "e1");

    let bad = run(&["train", "--experiment", "e3", "--conditioned", "--data", p(&data), "--out-dir", p(&tmp.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(2));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("--conditioned") && err.contains("--experiment"), "{err}");
}

const TINY: &[&str] = &[
    "--base-channels", "4", "--depth", "1", "--time-embed-dim", "8", "--t-steps", "50", "--beta-start", "1e-3", "--beta-end", "0.2", "--batch-size",
    "4", "--log-every", "5", "--lr", "2e-3",
];

fn train(data: &Path, exp: &str, out: &Path, extra: &[&str]) {
    let mut args = vec!["--seed", "3", "train", "--experiment", exp, "--data", p(data), "--steps", "10", "--out-dir", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn pipeline_profile_weights_eval_report_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |s: &str| tmp.path().join(s);
    ok(&["--seed", "5", "gen-data", "--kind", "tumor", "--count", "12", "--size", "8", "--out-dir", p(&t("data"))]);
    train(&t("data"), "e2", &t("e2"), &[]);
    train(&t("data"), "e3", &t("e3"), &[]);
    let record = fs::read_to_string(t("e2/record.csv")).unwrap();
    assert_eq!(record.lines().next(), Some("step,loss,val_iou,val_ece"));
    assert_eq!(record.lines().count(), 3);

    ok(&[
        "profile", "--cond", p(&t("e2/model.ckpt")), "--uncond", p(&t("e3/model.ckpt")), "--data", p(&t("data")), "--t-grid", "0:49:1", "--n-eval", "4",
        "--window", "5", "--out-dir", p(&t("prof")),
    ]);
    let svg = fs::read_to_string(t("prof/plot.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">conditioned</text>") && svg.contains(">unconditioned</text>"));
    let fp = fs::read_to_string(t("prof/fingerprint.csv")).unwrap();
    assert_eq!(fp.lines().next(), Some("kind,t_half,converged,terminal_value"));
    let prof = fs::read_to_string(t("prof/unconditioned.csv")).unwrap();
    assert_eq!(prof.lines().next(), Some("t,value,smoothed_value"));
    assert_eq!(prof.lines().count(), 51);

    ok(&["weights", "--profile", p(&t("prof/unconditioned.csv")), "--steps", "50", "--out-dir", p(&t("w"))]);
    let w = TimestepWeights::from_csv(&fs::read_to_string(t("w/weights.csv")).unwrap()).unwrap();
    assert_eq!(w.len(), 50);
    assert!((w.mean() - 1.0).abs() < 1e-9);
    train(&t("data"), "e2", &t("e2w"), &["--weights", p(&t("w/weights.csv"))]);

    ok(&["eval", "--checkpoint", p(&t("e2w/model.ckpt")), "--data", p(&t("data")), "--ensemble-n", "1", "--out-dir", p(&t("ev"))]);
    let summary = fs::read_to_string(t("ev/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "id,iou");
    assert!(lines[lines.len() - 2].starts_with("mean_iou,"));
    assert!(lines[lines.len() - 1].starts_with("ece,"));
    let mut std_maps = 0;
    for e in fs::read_dir(t("ev/maps")).unwrap() {
        let path = e.unwrap().path();
        if path.to_string_lossy().ends_with("_std.pgm") {
            let (_, _, v) = decode_pgm(&fs::read(&path).unwrap()).unwrap();
            assert!(v.iter().all(|&x| x == 0.0));
            std_maps += 1;
        }
    }
    assert_eq!(std_maps, lines.len() - 3);

    let mismatch = run(&["eval", "--checkpoint", p(&t("e2/model.ckpt")), "--data", p(&t("other")), "--out-dir", p(&t("x"))]);
    assert_eq!(mismatch.status.code(), Some(3));
    ok(&["gen-data", "--kind", "tumor", "--count", "4", "--size", "16", "--out-dir", p(&t("other"))]);
    let mismatch = run(&["eval", "--checkpoint", p(&t("e2/model.ckpt")), "--data", p(&t("other")), "--out-dir", p(&t("x"))]);
    assert_eq!(mismatch.status.code(), Some(2));

    ok(&["report", "--input", p(&t("prof")), "--out-dir", p(&t("rep"))]);
    let index = fs::read_to_string(t("rep/index.md")).unwrap();
    assert!(index.contains("conditioned.svg") && index.contains("profiles_overlay.svg"));

    // every manifest replays to byte-identical outputs
    for dir in ["data", "e2", "e3", "prof", "w", "e2w", "ev"] {
        let again = t(&format!("replay-{dir}"));
        ok(&["replay", p(&t(dir).join("run.json")), "--out-dir", p(&again)]);
        assert_eq!(tree(&t(dir)), tree(&again), "{dir}");
    }
}
