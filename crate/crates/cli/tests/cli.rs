use std::path::{Path, PathBuf};
use std::process::Command as Process;

use serde_json::Value;
use tensorformer::{run, CliError, RunManifest};

fn tf(args: &[&str]) -> tensorformer::Result<tensorformer::Outcome> {
    let mut argv = vec!["tensorformer".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn metrics(dir: &Path) -> Value {
    serde_json::from_slice(&bytes(&dir.join("metrics.json"))).unwrap()
}

/// Phantom plus noiseless f64 signals in `root`.
fn noiseless(root: &Path, dims: &str) -> (PathBuf, PathBuf) {
    let ph = root.join("ph");
    let sy = root.join("sy");
    tf(&["phantom", "--dims", dims, "--seed", "3", "--dtype", "f64", "--out", p(&ph)]).unwrap();
    tf(&["synth", "--phantom", p(&ph), "--scheme", "skare6", "--dtype", "f64", "--out", p(&sy)]).unwrap();
    (ph, sy)
}

#[test]
fn phantom_writes_volumes_sidecars_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ph");
    let o = tf(&["phantom", "--dims", "6,5,4", "--seed", "9", "--out", p(&out)]).unwrap();
    for stem in ["tensors", "labels", "s0"] {
        assert!(out.join(format!("{stem}.raw")).is_file(), "{stem}.raw");
        assert!(out.join(format!("{stem}.json")).is_file(), "{stem}.json");
    }
    assert_eq!(o.outputs.len(), 6);
    let m = RunManifest::load(&o.manifest).unwrap();
    assert_eq!(m.command, "phantom");
    assert_eq!(m.seeds["phantom"], 9);
    assert_eq!(m.outputs.len(), 6);
    for f in &m.outputs {
        assert_eq!(f.sha256.len(), 64);
    }
}

#[test]
fn phantom_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = tf(&["phantom", "--dims", "7", "--seed", "4", "--model", "curved-tract", "--out", p(&dir.path().join("a"))]).unwrap();
    let b = tf(&["phantom", "--dims", "7", "--seed", "4", "--model", "curved-tract", "--out", p(&dir.path().join("b"))]).unwrap();
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        assert_eq!(bytes(x), bytes(y), "{}", x.display());
    }
    let c = tf(&["phantom", "--dims", "7", "--seed", "5", "--model", "curved-tract", "--out", p(&dir.path().join("c"))]).unwrap();
    assert_ne!(bytes(&a.outputs[0]), bytes(&c.outputs[0]));
}

#[test]
fn patch_larger_than_grid_is_a_patching_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ph");
    let err = tf(&["phantom", "--dims", "2,2,2", "--patch", "5", "--out", p(&out)]).unwrap_err();
    assert!(matches!(err, CliError::Input(_)), "{err:?}");
    assert!(err.to_string().contains("smaller than the patch"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn learned_fit_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let err = tf(&["fit", "--dwi", "nowhere/dwi", "--method", "model-st", "--out", p(&out)]).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err:?}");
    assert_eq!(err.exit_code(), 2);
    assert!(!out.exists(), "nothing should be created on a usage error");
}

#[test]
fn binary_reports_errors_on_one_line_with_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_tensorformer");
    let o = Process::new(bin)
        .args(["fit", "--dwi", "x", "--method", "model-s", "--out"])
        .arg(dir.path().join("f"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=usage message="), "{err}");

    let o = Process::new(bin)
        .args(["phantom", "--dims", "2", "--patch", "5", "--out"])
        .arg(dir.path().join("p"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let o = Process::new(bin).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8(o.stdout).unwrap().contains("phantom"));
}

#[test]
fn out_dir_environment_variable_places_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_tensorformer");
    let o = Process::new(bin)
        .args(["phantom", "--dims", "4", "--out", "ph"])
        .env("TENSORFORMER_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("ph").join("manifest.json").is_file());
}

#[test]
fn classical_fits_recover_noiseless_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let (ph, sy) = noiseless(dir.path(), "6");
    let dwi = sy.join("dwi");
    let mut stems = Vec::new();
    for method in ["ols", "cwlls", "cnls"] {
        let fit = dir.path().join(method);
        tf(&["fit", "--dwi", p(&dwi), "--method", method, "--dtype", "f64", "--out", p(&fit)]).unwrap();
        let ev = dir.path().join(format!("ev_{method}"));
        tf(&["evaluate", "--pred", p(&fit.join("tensors")), "--ref", p(&ph.join("tensors")), "--labels", p(&ph.join("labels")), "--method", method, "--out", p(&ev)]).unwrap();
        let t = metrics(&ev)["report"]["overall"]["tensor_error"].as_f64().unwrap();
        // tensors are ~1e-3 mm^2/s, so this is a relative error below 1e-6
        assert!(t < 1e-9, "{method}: {t}");
        stems.push(fit.join("tensors"));
    }
    let (ols, _) = tensorformer_core::Volume4D::<f64>::load(&stems[0]).unwrap();
    let (cwlls, _) = tensorformer_core::Volume4D::<f64>::load(&stems[1]).unwrap();
    let worst = ols.data().iter().zip(cwlls.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = ols.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 1e-8 * scale, "ols vs cwlls: {worst} (scale {scale})");
}

#[test]
fn evaluate_writes_all_four_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (ph, _) = noiseless(dir.path(), "5");
    let noisy = dir.path().join("noisy");
    tf(&["synth", "--phantom", p(&ph), "--snr", "20", "--noise-seed", "1", "--out", p(&noisy)]).unwrap();
    let fit = dir.path().join("fit");
    tf(&["fit", "--dwi", p(&noisy.join("dwi")), "--method", "cwlls", "--out", p(&fit)]).unwrap();
    let ev = dir.path().join("ev");
    let o = tf(&["evaluate", "--pred", p(&fit.join("tensors")), "--ref", p(&ph.join("tensors")), "--labels", p(&ph.join("labels")), "--method", "cwlls", "--out", p(&ev)]).unwrap();
    let m = metrics(&ev);
    let overall = &m["report"]["overall"];
    for key in ["tensor_error", "md_error", "fa_error", "angle_error_deg"] {
        let v = overall[key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!(v.is_finite() && v > 0.0, "{key} = {v}");
    }
    let csv = String::from_utf8(bytes(&ev.join("metrics.csv"))).unwrap();
    assert!(csv.starts_with("method,region,metric,value\n"));
    for metric in ["tensor", "md", "fa", "angle"] {
        assert!(csv.contains(&format!("cwlls,all,{metric},")), "{metric}");
    }
    for f in ["bland_altman_fa.csv", "bland_altman_md.csv"] {
        let t = String::from_utf8(bytes(&ev.join(f))).unwrap();
        assert_eq!(t.lines().count(), 1 + 125, "{f}");
    }
    assert!(o.summary[0].contains("tensor(x1000)"));
}

#[test]
fn sweep_covers_the_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("ph");
    tf(&["phantom", "--dims", "5", "--out", p(&ph)]).unwrap();
    let out = dir.path().join("sweep");
    tf(&["sweep", "--phantom", p(&ph), "--seeds", "2", "--methods", "ols,cwlls", "--out", p(&out)]).unwrap();
    let summary = String::from_utf8(bytes(&out.join("sweep_summary.csv"))).unwrap();
    assert!(summary.starts_with("snr_db,method,metric,mean\n"));
    for snr in ["none", "50", "30", "20", "15"] {
        for method in ["ols", "cwlls"] {
            for metric in ["tensor", "md", "fa", "angle"] {
                let prefix = format!("{snr},{method},{metric},");
                assert!(summary.lines().any(|l| l.starts_with(&prefix)), "missing {prefix}");
            }
        }
    }
    let full = String::from_utf8(bytes(&out.join("sweep.csv"))).unwrap();
    assert!(full.starts_with("snr_db,seed,method,region,metric,value\n"));
    let v: Value = serde_json::from_slice(&bytes(&out.join("sweep.json"))).unwrap();
    // noiseless column plus 4 levels x 2 seeds, per method
    assert_eq!(v["entries"].as_array().unwrap().len(), 2 * (1 + 4 * 2));
}

#[test]
fn sweep_with_learned_method_needs_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let err = tf(&["sweep", "--phantom", "ph", "--methods", "cwlls,model-s", "--out", p(&out)]).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err:?}");
    assert!(!out.exists());
}

const TINY: [&str; 22] = [
    "--phantoms", "2", "--dims", "8", "--snr", "20,30", "--patch", "3", "--d-model", "8", "--d-head", "4",
    "--heads", "2", "--layers", "1", "--max-epochs", "2", "--lr", "1e-3", "--inference-stride", "3",
];

#[test]
fn two_stage_training_and_learned_fits() {
    let dir = tempfile::tempdir().unwrap();
    let s_dir = dir.path().join("s");
    let mut args = vec!["train", "--stage", "s", "--out", p(&s_dir)];
    args.extend(TINY);
    tf(&args).unwrap();
    let s_ck = s_dir.join("model.ckpt");
    assert!(s_ck.is_file());
    let log = String::from_utf8(bytes(&s_dir.join("train_log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 3, "two epochs plus summary:\n{log}");
    for l in log.lines() {
        serde_json::from_str::<Value>(l).unwrap();
    }

    let err = tf(&["train", "--stage", "st", "--out", p(&dir.path().join("bad"))]).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)));

    let st_dir = dir.path().join("st");
    let mut args = vec!["train", "--stage", "st", "--frozen", p(&s_ck), "--out", p(&st_dir)];
    args.extend(TINY);
    let o = tf(&args).unwrap();
    let m = RunManifest::load(&o.manifest).unwrap();
    assert_eq!(m.details["model_s_hash_before"], m.details["model_s_hash_after"]);
    let st_ck = st_dir.join("model.ckpt");

    let (ph, sy) = noiseless(dir.path(), "7");
    for (method, ck) in [("model-s", &s_ck), ("model-st", &st_ck)] {
        let fit = dir.path().join(format!("fit_{method}"));
        tf(&["fit", "--dwi", p(&sy.join("dwi")), "--method", method, "--checkpoint", p(ck), "--labels", p(&ph.join("labels")), "--out", p(&fit)]).unwrap();
        let (t, _) = tensorformer_core::Volume4D::<f64>::load(&fit.join("tensors")).unwrap();
        assert_eq!(t.dims(), [7, 7, 7]);
        assert_eq!(t.channels(), 6);
        assert!(t.data().iter().all(|v| v.is_finite()));
    }

    // an S checkpoint is not accepted as Model ST
    let err = tf(&["fit", "--dwi", p(&sy.join("dwi")), "--method", "model-st", "--checkpoint", p(&s_ck), "--out", p(&dir.path().join("wrong"))]).unwrap_err();
    assert!(matches!(err, CliError::Input(_)), "{err:?}");

    let sw = dir.path().join("sweep");
    tf(&["sweep", "--phantom", p(&ph), "--seeds", "1", "--snr", "30,20", "--methods", "cwlls,model-s,model-st", "--checkpoint-s", p(&s_ck), "--checkpoint-st", p(&st_ck), "--out", p(&sw)]).unwrap();
    let summary = String::from_utf8(bytes(&sw.join("sweep_summary.csv"))).unwrap();
    assert!(summary.contains("20,model-st,tensor,"));
}

#[test]
fn rerun_reproduces_outputs_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("ph");
    tf(&["phantom", "--dims", "6", "--seed", "2", "--out", p(&ph)]).unwrap();
    let first = dir.path().join("first");
    let o = tf(&["--threads", "1", "synth", "--phantom", p(&ph), "--snr", "15", "--noise-seed", "8", "--out", p(&first)]).unwrap();
    let again = dir.path().join("again");
    let r = tf(&["rerun", "--manifest", p(&o.manifest), "--out", p(&again)]).unwrap();
    assert_eq!(o.outputs.len(), r.outputs.len());
    for (a, b) in o.outputs.iter().zip(&r.outputs) {
        assert_eq!(a.file_name(), b.file_name());
        assert_eq!(bytes(a), bytes(b), "{}", a.display());
    }
    let m1 = RunManifest::load(&o.manifest).unwrap();
    let m2 = RunManifest::load(&r.manifest).unwrap();
    for (a, b) in m1.outputs.iter().zip(&m2.outputs) {
        assert_eq!(a.sha256, b.sha256);
    }
}
